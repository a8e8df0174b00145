"""Correlated-GP attention for transformers: exact and sparse (DTC) heads, metrics and a desk-scale harness."""

__version__ = "0.1.0"
