"""Offline conservative distribution-correction learning for session recommendation."""

__version__ = "0.1.0"
