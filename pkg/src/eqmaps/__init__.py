"""Numerical laboratory for equivariant Schrödinger maps near harmonic maps."""

__version__ = "0.1.0"
