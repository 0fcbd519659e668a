"""Explanation-guided contrastive learning for sequential recommendation."""

__version__ = "0.1.0"
