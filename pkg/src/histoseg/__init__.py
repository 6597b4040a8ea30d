"""Cascaded two-stage tumour segmentation for gigapixel tiled slides."""

__version__ = "0.1.0"
