"""Desk-scale testbed for recursive-belief manipulation policies."""

__version__ = "0.1.0"
