"""Exact Monte Carlo inference for queries released through additive privacy mechanisms."""

__version__ = "0.1.0"
