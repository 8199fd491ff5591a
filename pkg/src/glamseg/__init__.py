"""Global-token attention for multi-resolution windowed transformers."""

__version__ = "0.1.0"
