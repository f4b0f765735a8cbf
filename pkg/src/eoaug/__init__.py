"""Diffusion-based data augmentation for Earth-observation-style imagery, at desk scale."""

__version__ = "0.1.0"
