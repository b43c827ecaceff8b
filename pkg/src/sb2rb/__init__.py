"""Subband-to-RB precoder upsampling for codebook feedback in FDD massive MIMO."""

__version__ = "0.1.0"
