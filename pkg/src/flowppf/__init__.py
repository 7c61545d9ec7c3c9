"""Analytical probabilistic power flow with conditional invertible flows."""

__version__ = "0.1.0"
