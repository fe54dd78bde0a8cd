"""Deterministic desk-scale testbed for interruption-aware cooperative perception."""

__version__ = "0.1.0"
