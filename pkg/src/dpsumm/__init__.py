"""Differentially private fine-tuning and evaluation for query-conditioned
meeting summarization."""

__version__ = "0.1.0"
