"""Numerical laboratory for SRB-measure candidates of surface diffeomorphisms."""

__version__ = '1.0.0'
