"""Federated graph condensation with an information-bottleneck feature transform."""

__version__ = "0.1.0"
