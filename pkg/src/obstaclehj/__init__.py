"""Penalized approximation and discrete nonlinear adjoint for obstacle problems of
degenerate viscous Hamilton-Jacobi equations on the torus."""

from .catalog import CATALOG, catalog_keys, get_problem
from .domain import ProblemSpec, TorusGrid, build_grid, validate_problem

__all__ = ["CATALOG", "ProblemSpec", "TorusGrid", "build_grid", "catalog_keys", "get_problem",
           "validate_problem"]
