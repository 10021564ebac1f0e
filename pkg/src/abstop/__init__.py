"""Bayesian sequential early termination of A/B experiments."""

__version__ = "0.1.0"
