"""Contrast-based posterior inference and spatial case studies."""

__version__ = "0.1.0"
