"""Spectral tools for parabolic A-free fields on the space-time torus and a
variational solver for non-Newtonian incompressible flow."""

from .grid import SpaceTimeField, TorusGrid, make_grid, random_field
from .integrands import (ConstitutiveLaw, DataSet, constitutive_integrand, datadriven_integrand,
                         envelope_estimate, parse_law)
from .symbols import OperatorSpec, ParabolicPair, builtin

__version__ = "0.1.0"

__all__ = ["ConstitutiveLaw", "DataSet", "OperatorSpec", "ParabolicPair", "SpaceTimeField",
           "TorusGrid", "builtin", "constitutive_integrand", "datadriven_integrand",
           "envelope_estimate", "make_grid", "parse_law", "random_field"]
