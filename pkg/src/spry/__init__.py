"""Sparse-view neural field reconstruction with depth supervision and coarse-to-fine encoding."""

__version__ = "0.1.0"
