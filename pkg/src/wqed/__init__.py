"""Density-matrix MPS simulation of emitters coupled to a time-binned waveguide."""

__version__ = "0.1.0"
