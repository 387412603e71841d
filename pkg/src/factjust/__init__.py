"""Retrieval-augmented fact-check justification generation with retriever distillation."""

__version__ = "0.1.0"
