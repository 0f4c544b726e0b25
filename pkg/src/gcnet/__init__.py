"""Optimal-feedback pipeline: Pontryagin solves, backward-generated datasets,
a from-scratch feed-forward controller network, and closed-loop evaluation."""

from .models import (
    ControlBounds,
    DisturbanceSpec,
    Lander2dParams,
    ModelId,
    PrecessionParams,
    QuadPlanarParams,
    Trajectory,
    eval_dynamics,
    eval_jacobians,
    integrate,
)

__version__ = "0.1.0"

__all__ = [
    "ControlBounds",
    "DisturbanceSpec",
    "Lander2dParams",
    "ModelId",
    "PrecessionParams",
    "QuadPlanarParams",
    "Trajectory",
    "eval_dynamics",
    "eval_jacobians",
    "integrate",
    "__version__",
]
