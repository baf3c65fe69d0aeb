"""Desk-scale laboratory for diffusion-guided 3D distillation on voxel radiance fields."""

__version__ = "0.1.0"
