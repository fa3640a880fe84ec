"""Glomerular detection, classification and segmentation pipeline toolkit."""

__version__ = "0.1.0"
