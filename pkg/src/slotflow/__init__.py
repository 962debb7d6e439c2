"""Sinkhorn-routed slot identity conditioning on a toy flow-matching video generator."""

__version__ = "0.1.0"
