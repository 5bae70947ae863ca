"""Pavement-crack segmentation with residual and hybrid attention blocks."""

__version__ = "0.1.0"
