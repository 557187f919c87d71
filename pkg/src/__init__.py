"""Empathy fusion engine: numerics, topic model, network, training and evaluation."""

__version__ = "1.0.0"
