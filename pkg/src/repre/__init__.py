"""Contrastive ViT pre-training with a multi-hierarchy pixel reconstruction branch."""

__version__ = "0.1.0"
