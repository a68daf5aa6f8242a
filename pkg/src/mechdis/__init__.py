"""Mechanism-sparsity regularized nonlinear ICA."""

__version__ = "0.1.0"
