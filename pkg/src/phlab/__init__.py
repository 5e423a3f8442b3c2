"""Numerical laboratory for breaking joint integrability of strong laminations on tori."""

__version__ = "0.1.0"
