"""Transferability-aware transformer for open-set domain adaptation of connectivity matrices."""

__version__ = "0.1.0"
