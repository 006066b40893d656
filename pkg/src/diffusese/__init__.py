"""Unsupervised diffusion-based speech enhancement with NMF and joint speech/noise priors."""

__version__ = "0.1.0"
