"""Numerical laboratory for thermodynamic formalism of rational maps."""

__version__ = "0.1.0"
