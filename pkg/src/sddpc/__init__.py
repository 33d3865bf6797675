"""Stochastic predictive control from models and from raw input-output data."""

__version__ = "0.1.0"
