"""Numerics for contact Hamilton-Jacobi equations on the flat torus."""

__version__ = "0.1.0"
