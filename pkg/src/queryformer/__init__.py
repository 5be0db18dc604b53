"""Gradient-checked transformer detection head with guided query positions
and cross-scale attention fusion, exercised on a synthetic-shapes
benchmark."""

__version__ = "0.1.0"
