"""Auralisation of spectrogram-CNN features."""

__version__ = "0.1.0"
