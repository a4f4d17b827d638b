"""Decentralized proximal-linearization solver for nonconvex problems with
coupled nonlinear equality constraints and box constraints."""

from .al import Classification, SolverState, classify_solution, eval_al, lyapunov, residual, subgrad_norms
from .diagnostics import (
    FiniteTermination,
    Linear,
    Sublinear,
    check_certificates,
    derive_constants,
    fit_rate,
)
from .errors import *  # noqa: F401,F403
from .instances import HvacParams, build_hvac, build_random, build_toy, centralized_baseline
from .problem import AgentProblem, ConsensusLayout, ConstantsEstimate, build_layout, estimate_constants
from .solver import (
    BetaFromNu,
    FixedBeta,
    Linesearch,
    RunResult,
    SolverConfig,
    Theoretical,
    initial_state,
    run,
)

__version__ = "0.1.0"
