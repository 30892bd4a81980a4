"""Viscosity solutions of weakly coupled Hamilton-Jacobi systems on the flat torus."""

from .fixed_point import SolveNotConverged, SolveReport, contraction_probe, semigroup_step, solve
from .lax_oleinik import MinimizingCurve, OperatorConfig, apply_operator, backtrack, curve_action
from .model import (
    CoupledSystem,
    InitialData,
    TorusGrid,
    VectorField,
    interpolate,
    quadratic_system,
    sup_norm,
    validate_system,
)

__version__ = "0.1.0"

__all__ = [
    "CoupledSystem",
    "InitialData",
    "MinimizingCurve",
    "OperatorConfig",
    "SolveNotConverged",
    "SolveReport",
    "TorusGrid",
    "VectorField",
    "apply_operator",
    "backtrack",
    "contraction_probe",
    "curve_action",
    "interpolate",
    "quadratic_system",
    "semigroup_step",
    "solve",
    "sup_norm",
    "validate_system",
]
