"""Sparse-view neural surface reconstruction with epipolar attention."""

__version__ = "0.1.0"
