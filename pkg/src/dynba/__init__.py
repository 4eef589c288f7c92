"""Uncertainty-aware dense bundle adjustment for dynamic scenes."""

__version__ = "0.1.0"
