"""Stochastic epidemic models and their large-population limits."""

__version__ = "0.1.0"
