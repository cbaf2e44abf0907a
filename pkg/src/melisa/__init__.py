"""One-step window-conditioned mean-flow surrogate for 2D periodic flows."""

__version__ = "0.1.0"
