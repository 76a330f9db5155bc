"""Latent flow-matching super-resolution of canopy height fields."""

__version__ = "0.1.0"
