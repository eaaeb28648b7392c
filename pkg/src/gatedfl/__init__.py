"""Federated fine-tuning simulator with secure/revealing adapters and keyed routing."""

__version__ = "0.1.0"
