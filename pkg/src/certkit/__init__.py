"""Certified training of 1-Lipschitz networks with generated auxiliary data."""

__version__ = "0.1.0"
