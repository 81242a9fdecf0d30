"""Covariance balancing model reduction with adjoint snapshots."""

__version__ = "0.3.0"
