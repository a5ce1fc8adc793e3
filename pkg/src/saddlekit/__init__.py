"""Uncertainty-aware saddle searches (NEB and Dimer) over stochastic force oracles."""

__version__ = "0.1.0"
