"""Lattice-attention n-best rescoring for two-pass speech recognition."""

__version__ = "0.1.0"
