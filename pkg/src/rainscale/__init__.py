"""Learned multiresolution precipitation downscaling toolkit."""

__version__ = "0.1.0"
