"""Continuous-scale super-resolution with a differential-prior latent diffusion model."""

__version__ = "0.1.0"
