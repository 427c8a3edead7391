"""Yield-map regression with a 3-D/2-D CNN on masked field rasters."""

__version__ = "0.1.0"
