"""Instance-specific low-rank weight composition for a toy diffusion model."""

__version__ = "0.1.0"
