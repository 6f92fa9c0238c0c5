"""Federated-learning poisoning arena with an adaptive, cue-driven aggregation defence."""

__version__ = "0.1.0"
