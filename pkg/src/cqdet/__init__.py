"""Composite-query multi-view 3D detection kernels with oracle-based verification."""

__version__ = "0.1.0"
