"""Numerical laboratory for the weakly asymmetric Ginzburg-Landau gradient model
and its stochastic Burgers fluctuation limit."""

from .potentials import Potential, validate_assumption_v
from .thermo import burgers_coefficients, moments, tilt_for_mean

__all__ = ["Potential", "validate_assumption_v", "burgers_coefficients", "moments", "tilt_for_mean"]
__version__ = "0.1.0"
