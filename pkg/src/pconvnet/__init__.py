"""Partial-convolution image inpainting in NumPy."""
__version__ = "0.1.0"
