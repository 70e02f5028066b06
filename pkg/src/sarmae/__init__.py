"""Masked-autoencoder pre-training and ViTDet-style detection on speckled imagery."""

__version__ = "0.1.0"
