"""Degeneracy-aware point-to-plane ICP."""

__version__ = "0.1.0"
