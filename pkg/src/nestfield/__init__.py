"""Nested multi-scale feature fields distilled onto 3D Gaussian scenes."""

__version__ = "0.1.0"
