"""Robust cross-view retrieval on a small reverse-mode tensor library."""

__version__ = "0.1.0"
