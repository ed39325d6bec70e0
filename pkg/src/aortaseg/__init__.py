"""Automated high-resolution aortic segmentation on CT, with or without contrast."""

__version__ = "0.1.0"
