"""Variational federated multi-task learning on a star-shaped network."""

__version__ = "0.1.0"
