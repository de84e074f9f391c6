"""Spatially-aware multi-modal embeddings of urban living circles, with
elderly chronic-disease prediction and multi-level health analyses."""

__version__ = "0.1.0"
