"""Finite-element solver for the regularized stochastic total variation flow."""

__version__ = "0.1.0"
