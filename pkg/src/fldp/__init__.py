"""Deterministic federated learning + differential privacy simulator."""

__version__ = "0.1.0"
