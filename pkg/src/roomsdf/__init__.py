"""Desk-scale indoor surface reconstruction with a learned deflection field."""

__version__ = "0.1.0"
