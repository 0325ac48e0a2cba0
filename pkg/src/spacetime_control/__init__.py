"""Space-time finite element solvers for parabolic optimal control problems."""

__version__ = "0.1.0"
