"""Confidence-weighted multi-modal fusion over non-aligned security event streams."""

__version__ = "0.1.0"
