"""Desk-scale simulator for training across clusters joined by slow WAN links."""

__version__ = "0.1.0"
