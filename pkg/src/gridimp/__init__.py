"""Radial distribution grid line impedance estimation from non-synchronized GMD data."""

__version__ = "0.1.0"
