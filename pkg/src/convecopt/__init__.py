"""Adjoint-based optimal control and stability laboratory for 2D
buoyancy-driven incompressible flow on a staggered grid."""

__version__ = "0.1.0"
