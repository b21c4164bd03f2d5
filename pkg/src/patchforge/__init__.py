"""Patch-prior 3D shape completion on truncated signed distance grids."""

__version__ = "0.1.0"
