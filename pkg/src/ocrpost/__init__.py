"""OCR post-correction with a char-level attention seq2seq model,
semi-supervised self-training, and lexically-aware beam decoding.

The package is organized bottom-up: `corpus` holds alphabets and datasets,
`metrics` the edit-distance scoring, `ngram` the count-based language models,
`wfsa` the lexicon automaton and per-step lexical scorer, `model` the
encoder-decoder network, `decoding` the beam search that fuses the two
scores, `selftrain` the iterative semi-supervised loop, and `experiments`
the fold/seed/grid orchestration behind the command line interface.
"""

__version__ = "0.1.0"
