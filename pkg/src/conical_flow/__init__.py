"""Rotationally symmetric twisted Kähler-Ricci flow on the two-sphere with cone points.

Modules: ``geometry`` (grid, reference metric, discrete calculus),
``regularization`` (smoothed cone metrics and twist), ``flow`` (time
integration), ``functionals`` (energies), ``monitors`` (runtime estimate
checks), ``limit`` (epsilon schedules, football limit, run files) and
``cli``.
"""

from .errors import ConicalFlowError
from .flow import FlowProblem, FlowState, SolverConfig, integrate_flow, solve_twisted_ke
from .geometry import REFERENCE, RadialField, RadialGrid, ReferenceGeometry
from .limit import EpsilonRun, SweepRecord, run_epsilon, run_sweep
from .regularization import RegularizationParams, select_k

__version__ = "0.1.0"

__all__ = [
    "ConicalFlowError", "FlowProblem", "FlowState", "SolverConfig", "integrate_flow",
    "solve_twisted_ke", "REFERENCE", "RadialField", "RadialGrid", "ReferenceGeometry",
    "EpsilonRun", "SweepRecord", "run_epsilon", "run_sweep", "RegularizationParams", "select_k",
]
