"""Photogrammetric reconstruction of tunnel surfaces from two tripod image sweeps."""

__version__ = "0.1.0"
