"""Compact convolutional transformer training stack built on numpy."""

__version__ = "0.1.0"
