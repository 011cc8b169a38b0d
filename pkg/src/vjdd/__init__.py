"""vjdd: temporally consistent video joint denoising and demosaicking."""

__version__ = "0.1.0"
