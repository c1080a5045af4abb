"""Masked-autoencoder pretraining for grayscale images, desk scale.

Core package behind the maekit service and CLI: a small reverse-mode
tensor engine, patch masking, the encoder/decoder model, downstream
heads, training, data handling, and metrics.
"""

__version__ = "0.1.0"
