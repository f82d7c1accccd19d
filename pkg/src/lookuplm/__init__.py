"""LookupLM: recurrent language models with hashed n-gram embedding tables."""

__version__ = "0.1.0"
