"""Routing manifold alignment for small sparse mixture-of-experts classifiers."""

__version__ = "0.1.0"
