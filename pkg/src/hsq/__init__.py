"""Weakly-supervised hyperspherical quantization for tag-supervised image retrieval."""

__version__ = "0.1.0"
