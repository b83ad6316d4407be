"""Probabilistic PCA contour regression with per-vertex uncertainty."""
__version__ = "0.1.0"
