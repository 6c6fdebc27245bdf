"""Bayesian data comparison for effective-connectivity models."""

__version__ = "0.1.0"
