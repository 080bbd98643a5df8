"""Fractional-noise stochastic evolution equations: operators, simulation and control."""

__version__ = "0.1.0"
