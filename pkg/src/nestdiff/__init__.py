"""Nested diffusion: a chain of diffusion models over a frozen latent hierarchy."""

__version__ = "0.1.0"
