"""Gaze-guided hand-motion sequence prediction (VQ-VAE codebook + causal transformer)."""

__version__ = "0.1.0"
