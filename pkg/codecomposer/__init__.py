"""Codecomposer - composer-conditioned music generation with VQ-VAE tokens and discrete diffusion."""

from codecomposer.__version__ import __version__

__all__ = ["__version__"]
