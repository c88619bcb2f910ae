"""Multitask training of acoustic scene classification and sound event detection
with constant, dynamic-weight-average and multi-focal loss weighting."""

__version__ = "0.1.0"
