"""Binarized split learning with XNOR-popcount kernels and leakage metrics."""

__version__ = "0.1.0"
