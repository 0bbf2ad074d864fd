"""Supervised matrix factorization trained by lifted low-rank projected gradient descent."""

__version__ = "0.1.0"
