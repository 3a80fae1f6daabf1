"""Numerical functional Ito calculus for path-dependent SDEs."""

__version__ = "0.1.0"
