"""Batch feature extraction from pretrained backbones into CGF1 matrices."""

__version__ = "0.1.0"
