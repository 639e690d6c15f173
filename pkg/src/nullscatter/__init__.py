"""Null geodesic scattering: forward relation data and reconstruction of the conformal class."""

__version__ = "0.1.0"
