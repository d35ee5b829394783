"""Finite-width neural tangent kernel analysis of two-layer networks trained by gradient descent
on separable data: kernels, margin certificates, training harness and bound verification."""

__version__ = "0.1.0"
