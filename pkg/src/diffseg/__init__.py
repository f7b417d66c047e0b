"""Lesion segmentation from class-conditional diffusion noise differences."""

__version__ = "0.1.0"
