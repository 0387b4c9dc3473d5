"""Knowledge-injected cross-lingual extractive QA, small enough for a laptop CPU.

Pipeline: assemble multilingual knowledge triples into masked training
samples, train a compact transformer on entity completion, finetune it on
span extraction in one pivot language, and evaluate question/context
language pairs separately.
"""

__version__ = "0.1.0"
