"""Numerical laboratory for impulse-control quasi-variational inequalities.

The package solves terminal-value Hamilton-Jacobi-Bellman equations coupled
with a nonlocal impulse obstacle on rectangular grids, audits the structural
hypotheses the theory needs, checks grid functions against several weak
(viscosity-type) solution definitions, and runs comparison and
doubling-of-variables diagnostics.
"""

from .expr import parse, evaluate, to_source
from .core import (
    AssumptionConstants,
    Cone,
    Grid,
    GridFunction,
    ImpulseProblem,
    ConfigError,
    load_problem,
    sample,
)

__all__ = [
    "parse",
    "evaluate",
    "to_source",
    "AssumptionConstants",
    "Cone",
    "Grid",
    "GridFunction",
    "ImpulseProblem",
    "ConfigError",
    "load_problem",
    "sample",
]

__version__ = "0.1.0"
