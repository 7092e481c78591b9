"""Camera-conditioned mental-rotation VQA on latent feature volumes."""

__version__ = "0.1.0"
