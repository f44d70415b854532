"""Slider-driven facial deformation editing on a synthetic ground-truth domain."""

__version__ = "0.1.0"
