"""Spectral PDE and physics-informed neural-operator laboratory."""

__version__ = "0.1.0"

from .grids import Field, Grid, SpectrumField  # noqa: F401
