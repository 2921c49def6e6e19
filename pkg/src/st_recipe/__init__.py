"""End-to-end speech translation recipe with word-level knowledge distillation."""

__version__ = "0.1.0"
