"""Predicate prediction between object pairs from word embeddings and box
geometry, plus Rec@K evaluation for predicate/phrase/relationship detection."""

__version__ = "0.1.0"

from .backend import active_backend

__all__ = ["active_backend", "__version__"]
