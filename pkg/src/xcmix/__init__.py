"""Extreme multilabel training with mixed hard/random negative sampling."""

__version__ = "0.1.0"
