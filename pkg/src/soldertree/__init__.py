"""Decomposed multi-party query execution over soldered circuit trees."""

__version__ = "0.1.0"
