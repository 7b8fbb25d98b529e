"""Word-alignment preference data construction and evaluation for MT."""

__version__ = "0.1.0"
