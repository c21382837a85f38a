"""Negative-free multimodal joint-embedding training (SLAP) with an InfoNCE baseline."""

__version__ = "0.1.0"
