"""Confidence-aware partial labels and focal loss for ice-type patch classification."""

__version__ = "0.1.0"
