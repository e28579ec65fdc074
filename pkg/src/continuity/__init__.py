"""Convergence testing for learned continuous-time dynamics."""

__version__ = "0.1.0"
