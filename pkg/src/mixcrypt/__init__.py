"""Mixup-with-sign-mask image encryption and the fusion-denoising attack."""

__version__ = "0.1.0"
