"""Probabilistic masking for neural-network sparsification."""
__version__ = "0.1.0"
