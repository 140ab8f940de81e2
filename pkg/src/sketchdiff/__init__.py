"""Abstraction-aware sketch conditioning for a desk-scale diffusion model."""

__version__ = "0.1.0"
