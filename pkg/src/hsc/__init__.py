"""Hierarchical saliency-aware learned image codec and perceptual metric lab."""

__version__ = "0.1.0"
