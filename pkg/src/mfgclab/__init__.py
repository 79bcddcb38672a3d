"""Numerical laboratory for extended mean field games with common noise.

Builds and compares three views of one interaction model: the finite
N-player closed-loop game, the conditional McKean-Vlasov equilibrium, and
the central-planner (mean field control) problem; plus diagnostics that
test the measure flows themselves (weak-form residuals, recovery of the
common noise from the flow).
"""

from .kernels import BACKEND as kernel_backend
from .model import (
    DeclaredBounds,
    ModelSpec,
    NoisePath,
    TimeGrid,
    ValidationReport,
    catalog,
    eval_drift,
    eval_running_cost,
    eval_terminal,
    make_model,
    validate_model,
)
from .measures import (
    Ensemble,
    MeasureFlow,
    Scenario,
    ScenarioEnsemble,
    ensemble_law_distance,
    flow_distance,
    shift_flow,
    sliced_wasserstein,
    wasserstein_1d,
)

__version__ = "0.1.0"
