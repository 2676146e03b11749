"""Continual learning with task attention, projection vectors and expanding heads."""

__version__ = "0.1.0"
