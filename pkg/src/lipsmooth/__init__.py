"""Smooth inner and outer approximation of bounded Lipschitz domains."""

__version__ = "0.1.0"
