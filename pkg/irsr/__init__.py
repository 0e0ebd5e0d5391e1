"""Class-conditioned GAN super-resolution of single-band infrared images."""

__version__ = "0.1.0"
