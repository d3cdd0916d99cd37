"""Synthetic pond scenes, snapshot capture and learned pose denoising."""

__version__ = "0.1.0"
