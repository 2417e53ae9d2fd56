"""Differentially private low-rank-adapter fine-tuning for multi-label
report classification, with evaluation and a memorization probe."""

__version__ = "0.1.0"
