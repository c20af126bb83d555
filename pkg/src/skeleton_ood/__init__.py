"""Skeleton action recognition with energy-based out-of-distribution detection."""

__version__ = "0.1.0"
