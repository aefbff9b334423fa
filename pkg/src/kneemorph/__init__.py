"""Diffusion-based morphing of knee radiographs: a numpy-only reference build."""

__version__ = "0.1.0"
