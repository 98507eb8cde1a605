"""Latent text diffusion with learnable forward processes."""

__version__ = "0.1.0"
