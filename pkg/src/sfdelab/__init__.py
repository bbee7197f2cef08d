"""Simulation and diagnostics for stochastic functional differential equations.

Typical use::

    from sfdelab import Segment, model_grid, preset, simulate_ensemble

    model = preset("paper-eq11")
    grid = model_grid(model, dt=0.01)
    phi = Segment.constant(grid, [1.0])
    ens = simulate_ensemble(model, "split_step_implicit", phi, 1000, 10.0, seed=1)
"""

from .integrators import SCHEMES, PathEnsemble, implicit_drift_solve, simulate_ensemble, step, tamed_drift
from .model import (
    ConfigError,
    DelayModel,
    H0Failure,
    ModelError,
    Segment,
    SegmentGrid,
    check_h2,
    load_model,
    model_from_config,
    preset,
    sup_norm,
    trace_norm,
    verify_h0,
)
from .noise import NoiseStream

__version__ = "0.1.0"


def model_grid(model: DelayModel, dt: float) -> SegmentGrid:
    """Segment grid on ``[-r, 0]`` with spacing ``dt`` for ``model``."""
    return SegmentGrid(model.r, dt)


__all__ = [
    "SCHEMES",
    "ConfigError",
    "DelayModel",
    "H0Failure",
    "ModelError",
    "NoiseStream",
    "PathEnsemble",
    "Segment",
    "SegmentGrid",
    "check_h2",
    "implicit_drift_solve",
    "load_model",
    "model_from_config",
    "model_grid",
    "preset",
    "simulate_ensemble",
    "step",
    "sup_norm",
    "tamed_drift",
    "trace_norm",
    "verify_h0",
    "__version__",
]
