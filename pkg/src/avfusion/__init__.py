"""Audiovisual fusion transformers with latent attention bottlenecks."""

__version__ = "0.1.0"
