"""Skeleton motion anonymization by disentangled motion retargeting."""

__version__ = "0.1.0"
