"""Unsupervised deformable 3D registration with a coarse-to-fine attention network."""
from .grid import Grid3D, LabelMap, LandmarkSet, avg_pool_to, resize_trilinear, trilinear_sample

__version__ = "0.1.0"

__all__ = ["Grid3D", "LabelMap", "LandmarkSet", "trilinear_sample", "resize_trilinear", "avg_pool_to"]
