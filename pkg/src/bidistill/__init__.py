"""Bi-directional 2D-to-3D part-segmentation distillation with a synthetic teacher."""

__version__ = "0.1.0"
