"""Monaural source enhancement with an SDR training objective."""

__version__ = "0.1.0"
