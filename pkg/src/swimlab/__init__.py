"""Noun-token cross-attention supervision on a synthetic referring-expression task."""

__version__ = "0.1.0"
