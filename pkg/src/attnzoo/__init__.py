"""Efficient-attention laboratory: kernels, pyramid/columnar models, cost model and checks."""

__version__ = "0.1.0"
