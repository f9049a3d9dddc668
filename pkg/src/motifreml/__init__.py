"""Motif activity estimation with REML variance components."""

__version__ = "0.1.0"
