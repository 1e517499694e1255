"""Desk-scale single-domain generalized detection lab."""

__version__ = "0.1.0"
