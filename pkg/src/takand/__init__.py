"""Few-shot knowledge graph completion with neighbor attention, diffusion latent rules and KAN."""

__version__ = "0.1.0"
