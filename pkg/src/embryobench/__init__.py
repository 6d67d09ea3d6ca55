"""Semi-synthetic 3D+t fluorescence microscopy benchmark generator."""

__version__ = "0.1.0"
