"""Preference alignment for inpainting generators on a procedural toy world."""

__version__ = "0.1.0"
