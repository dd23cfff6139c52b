"""Two-stage truncated consistency training on low-dimensional data with an exact-score oracle."""

__version__ = "0.1.0"
