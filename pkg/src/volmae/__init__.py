"""Volumetric masked-autoencoder anomaly detection for multi-spectral MRI."""

__version__ = "0.1.0"
