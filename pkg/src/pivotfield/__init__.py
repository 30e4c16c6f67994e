"""Soil-moisture simulation and joint state/parameter estimation for
center-pivot irrigated fields: cylindrical Richards dynamics, sensitivity
based estimability analysis, masked augmented-state EKF assimilation and
kriging of hydraulic parameters."""

from .hydraulics import PARAM_KINDS, SoilHydraulics, capacity, conductivity, water_content
from .field_model import (
    CylGrid,
    FieldState,
    MeasurementBatch,
    ParameterField,
    SolverOptions,
    SurfaceForcing,
    observe,
    rhs,
    step_implicit,
)

__version__ = "0.1.0"

__all__ = [
    "PARAM_KINDS",
    "SoilHydraulics",
    "water_content",
    "conductivity",
    "capacity",
    "CylGrid",
    "FieldState",
    "ParameterField",
    "SurfaceForcing",
    "MeasurementBatch",
    "SolverOptions",
    "rhs",
    "step_implicit",
    "observe",
    "__version__",
]
