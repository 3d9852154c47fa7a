"""Two-stage occupancy grid prediction in a learned style/content latent space."""

__version__ = "0.1.0"
