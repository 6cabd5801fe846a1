"""Desk-scale 3D masked vision-transformer autoencoder with auxiliary and contrastive losses."""

__version__ = "0.1.0"
