"""Multi-bit watermarks for Gaussian splat scenes, read back through frozen encoder embeddings."""

__version__ = "0.1.0"
