"""Code-mixed Hindi-English word-level language identification.

Subword vocabularies (BPE, byte-level BPE, WordPiece), a small numpy transformer
encoder with hand-written gradients, MLM/NSP pretraining, token-classification
fine-tuning and per-label metric reports.
"""

__version__ = "0.1.0"
