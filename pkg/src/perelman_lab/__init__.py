"""Numerical laboratory for Ricci-flow entropy functionals, L-geodesics and reduced volume."""

__version__ = "0.1.0"
