"""Differentiable soft-program execution for visual question reasoning."""

__version__ = "0.1.0"
