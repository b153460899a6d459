"""Interpretable spatiotemporal event classification with statistical concepts and learned prototypes."""

__version__ = "0.1.0"
