"""Dual-view video-language pretraining on a synthetic surgical corpus."""

__version__ = "0.1.0"
