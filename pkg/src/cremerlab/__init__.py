"""Computational complex dynamics around Cremer quadratic Julia sets."""

__version__ = "0.1.0"
