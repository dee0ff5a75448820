"""Interpretable audio classification through NMF-grounded surrogate interpreters."""

__version__ = "0.1.0"
