"""Unbiased mean teacher for cross-domain detection, at desk scale."""

__version__ = "0.1.0"
