"""Continual-learning engine for embedding-based visual question answering."""

__version__ = "0.1.0"
