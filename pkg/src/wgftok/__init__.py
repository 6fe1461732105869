"""Discrete image tokenizers trained with forward-pass-only prior matching."""

__version__ = "0.1.0"
