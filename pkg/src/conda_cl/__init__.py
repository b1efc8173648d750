"""Continual source-free domain adaptation for semantic segmentation with a bijective likelihood penalty."""

__version__ = "0.1.0"
