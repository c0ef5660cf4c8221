"""Desk-scale EHR sequence modeling with state-space blocks."""

__version__ = "0.1.0"
