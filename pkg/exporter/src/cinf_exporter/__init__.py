"""Offline converter from pretrained decoder checkpoints to CINF bundles."""

__version__ = "0.1.0"
