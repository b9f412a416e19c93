"""Explainable DoS/DDoS detection toolkit."""

__version__ = "0.1.0"
