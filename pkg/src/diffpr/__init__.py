"""Phase retrieval from coded diffraction patterns with diffusion-model priors."""

__version__ = "0.1.0"
