"""Terrain-aware energy and traversal-time prediction for ground robots."""

__version__ = "0.1.0"
