"""Scratch harness for tuning the synthetic experiment hyperparameters."""
import sys
import time

import numpy as np

from kiqa.assembler import build_corpus
from kiqa.encoder import ModelConfig
from kiqa.evaluation import QAExample, evaluate
from kiqa.synthlang import SynthSpec, gen_kb, gen_qa
from kiqa.textmodel import build_vocab
from kiqa.training import TrainConfig, run_finetune, run_injection


def qa_examples(payload):
    out = []
    for para in payload["data"][0]["paragraphs"]:
        for qa in para["qas"]:
            out.append(QAExample(qa["id"], qa["question"], para["context"],
                                 tuple((a["text"], a["answer_start"]) for a in qa["answers"]),
                                 qa["context_lang"], qa["question_lang"]))
    return out


def run_one(seed, inject_lr, inject_epochs, ft_lr, ft_epochs, weights, d_model=64, n_layers=2,
            n_heads=4, d_ff=256, dropout=0.0, n_test=200):
    spec = SynthSpec(n_entities=200, n_relations=20, n_triples=1000,
                     languages=("syn0", "syn1"), n_qa_per_lang_pair=n_test,
                     n_qa_train=400, seed=1000 + seed)
    kb = gen_kb(spec)
    texts = [f for e in kb.entities.values() for f in e.forms.values()]
    texts += [f for r in kb.relations.values() for f in r.forms.values()]
    vocab = build_vocab(texts, max_size=2048)
    corpus = build_corpus(kb, spec.languages, 1000, weights, seed=2000 + seed)
    mc = ModelConfig(vocab_size=len(vocab), n_layers=n_layers, n_heads=n_heads,
                     d_model=d_model, d_ff=d_ff, max_len=64, dropout=dropout)
    icfg = TrainConfig(phase="inject", learning_rate=inject_lr, batch_size=24,
                       epochs=inject_epochs, seed=3000 + seed)
    t0 = time.time()
    inj = run_injection(corpus, vocab, icfg, mc, render_max_len=32)
    t_inj = time.time() - t0
    train, test = gen_qa(spec, kb)
    fcfg = TrainConfig(phase="finetune", learning_rate=ft_lr, batch_size=16,
                       epochs=ft_epochs, seed=4000 + seed)
    t0 = time.time()
    ft = run_finetune(inj.params, qa_examples(train), vocab, fcfg)
    t_ft = time.time() - t0
    examples = []
    for payload in test.values():
        examples.extend(qa_examples(payload))
    t0 = time.time()
    report = evaluate(ft.params, vocab, examples, max_answer_len=8)
    t_ev = time.time() - t0
    return report, inj.history[-1]["loss"], ft.history[-1]["loss"], (t_inj, t_ft, t_ev)


if __name__ == "__main__":
    seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
    inject_lr = float(sys.argv[2]) if len(sys.argv) > 2 else 1e-3
    inject_epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 12
    ft_lr = float(sys.argv[4]) if len(sys.argv) > 4 else 1e-3
    ft_epochs = int(sys.argv[5]) if len(sys.argv) > 5 else 20
    n_test = int(sys.argv[6]) if len(sys.argv) > 6 else 100

    for label, weights in (("mixed", (1.0, 1.0, 1.0)), ("k1only", (1.0, 0.0, 0.0))):
        report, il, fl, times = run_one(seed, inject_lr, inject_epochs, ft_lr, ft_epochs,
                                        weights, n_test=n_test)
        cells = {f"{c}/{q}": round(cell.f1, 1) for (c, q), cell in sorted(report.cells.items())}
        print(f"{label}: inj_loss={il:.3f} ft_loss={fl:.3f} cross={report.cross_pair_f1():.1f} "
              f"cells={cells} times={tuple(round(t,1) for t in times)}", flush=True)
