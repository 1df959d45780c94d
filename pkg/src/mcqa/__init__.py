"""Multimodal co-attention question answering on a small reverse-mode tensor core."""

__version__ = "0.1.0"
