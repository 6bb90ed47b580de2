"""Approximate Bayesian inference for small neural models."""

__version__ = "0.1.0"
