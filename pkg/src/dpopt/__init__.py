"""Differentially private distributed optimization with constraint coupling."""

__version__ = "0.1.0"
