"""Radiance fields conditioned on posed reference images through learned stereo features."""

__version__ = "0.1.0"
