"""Articulated hand model toolkit: latent-identity hand mesh model,
inverse-rendering fitting, and avatar adaptation from short scans."""

__version__ = "0.1.0"
