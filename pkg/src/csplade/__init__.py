"""Desk-scale learned sparse retrieval engine."""

__version__ = "0.1.0"
