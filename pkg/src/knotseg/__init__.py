"""Contour-to-knot volumetric segmentation of wood logs."""

__version__ = "0.1.0"
