"""Federated adaptive rank allocation for low-rank adapters, at desk scale."""

__version__ = "0.1.0"
