"""Augmented Lagrangian, linearization anchor, Lyapunov function and residuals."""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch, NonFiniteValue
from .problem import AgentProblem, ConsensusLayout

__all__ = [
    "SolverState",
    "Classification",
    "SubgradNorms",
    "split",
    "augmented_lagrangian",
    "eval_al",
    "g_value",
    "grad_g",
    "consensus_gap",
    "residual",
    "sum_h",
    "lyapunov",
    "grad_x_al",
    "grad_z_al",
    "subgrad_norms",
    "lyapunov_grad_norm",
    "classify_solution",
    "plain_objective",
]

Array = np.ndarray

#: tolerance used for exact criticality (square root of machine epsilon)
CRITICAL_TOL = float(np.sqrt(np.finfo(float).eps))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SolverState:
    """Full iterate ``(X_bar, Z, lambda, mu, X_bar_prev)`` plus algorithm scalars.

    ``x_bar[i]`` is the stacked vector ``(X_i, Y_i)`` of agent ``i`` (0-based).
    ``step_sizes`` holds the proximal coefficients that produced this iterate.
    """

    x_bar: tuple
    x_bar_prev: tuple
    z: Array
    lam: tuple
    mu: tuple
    rho: float
    step_sizes: Array
    beta: float = 0.0
    iter: int = 0
    k_underbar: Optional[int] = None

    def __post_init__(self):
        for name in ("x_bar", "x_bar_prev", "lam", "mu"):
            object.__setattr__(self, name, tuple(_frozen(v) for v in getattr(self, name)))
        object.__setattr__(self, "z", _frozen(self.z))
        object.__setattr__(self, "step_sizes", _frozen(self.step_sizes))
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if np.any(self.step_sizes <= 0):
            raise ValueError("step sizes must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        n = len(self.x_bar)
        if not (len(self.x_bar_prev) == len(self.lam) == len(self.mu) == self.step_sizes.shape[0] == n):
            raise DimensionMismatch("per-agent blocks disagree on the number of agents")

    def replace(self, **changes) -> "SolverState":
        return replace(self, **changes)

    def validate(self, problems: Sequence[AgentProblem], layout: ConsensusLayout):
        if len(problems) != len(self.x_bar) or layout.n_agents != len(self.x_bar):
            raise DimensionMismatch("state, problems and layout disagree on the agent count")
        if self.z.shape != (layout.global_dim,):
            raise DimensionMismatch("z has the wrong length")
        for i, p in enumerate(problems):
            n = layout.local_dim(i)
            if self.x_bar[i].shape != (2 * n,) or self.x_bar_prev[i].shape != (2 * n,):
                raise DimensionMismatch(f"agent {i + 1}: x_bar must have length {2 * n}")
            if self.mu[i].shape != (n,):
                raise DimensionMismatch(f"agent {i + 1}: mu must have length {n}")
            if self.lam[i].shape != (p.dim_h,):
                raise DimensionMismatch(f"agent {i + 1}: lambda must have length {p.dim_h}")


class Classification(str, enum.Enum):
    CRITICAL = "Critical"
    EPS_CRITICAL = "EpsCritical"
    NOT_CONVERGED = "NotConverged"


class SubgradNorms(NamedTuple):
    x: float
    z: float
    gamma: float
    u: float


def split(x_bar_i: Array):
    n = x_bar_i.shape[0] // 2
    return x_bar_i[:n], x_bar_i[n:]


def consensus_gap(layout: ConsensusLayout, i: int, x_bar_i: Array, z: Array) -> Array:
    """``A_i X_bar_i - E_i Z``."""
    X, Y = split(x_bar_i)
    return X + Y - layout.gather(i, z)


def _finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"{what} is not finite")
    return value


def g_value(
    problem: AgentProblem, x_bar_i: Array, lambda_i: Array, rho: float, include_slack: bool = True
) -> float:
    """Smooth part of agent ``i``'s subproblem: objective, multiplier and penalty on ``h`` and slack weight.

    ``include_slack=False`` drops the ``M ||Y||^2`` term (used when the
    solver keeps that quadratic exact instead of linearizing it).
    """
    X, Y = split(x_bar_i)
    h = problem.eval_h(X)
    val = problem.objective(X) + float(lambda_i @ h) + 0.5 * rho * float(h @ h)
    if include_slack:
        val += problem.slack_penalty * float(Y @ Y)
    return float(_finite(val, f"g of agent {problem.agent_id}"))


def grad_g(
    problem: AgentProblem, x_bar_i: Array, lambda_i: Array, rho: float, include_slack: bool = True
) -> Array:
    """Gradient of :func:`g_value` with respect to ``(X_i, Y_i)``."""
    X, Y = split(np.asarray(x_bar_i, dtype=float))
    h = problem.eval_h(X)
    J = problem.eval_jac(X)
    gx = problem.objective_grad(X) + J.T @ (np.asarray(lambda_i, dtype=float) + rho * h)
    gy = 2.0 * problem.slack_penalty * Y if include_slack else np.zeros_like(Y)
    return _finite(np.concatenate([gx, gy]), f"grad g of agent {problem.agent_id}")


def augmented_lagrangian(problems, layout, x_bar, z, lam, mu, rho) -> float:
    """Augmented Lagrangian value for explicit arguments; terms summed in agent order."""
    total = 0.0
    for i, p in enumerate(problems):
        X, Y = split(x_bar[i])
        h = p.eval_h(X)
        gap = consensus_gap(layout, i, x_bar[i], z)
        total += (
            p.objective(X)
            + p.slack_penalty * float(Y @ Y)
            + float(lam[i] @ h)
            + 0.5 * rho * float(h @ h)
            + float(mu[i] @ gap)
            + 0.5 * rho * float(gap @ gap)
        )
    return float(_finite(total, "augmented Lagrangian"))


def eval_al(state: SolverState, problems, layout) -> float:
    return augmented_lagrangian(problems, layout, state.x_bar, state.z, state.lam, state.mu, state.rho)


def plain_objective(problems, layout, z) -> float:
    """Global objective evaluated at a consensus point ``Z`` (every copy equal to ``Z``)."""
    return float(sum(p.objective(layout.gather(i, z)) for i, p in enumerate(problems)))


def sum_h(state_or_xbar, problems) -> float:
    x_bar = state_or_xbar.x_bar if isinstance(state_or_xbar, SolverState) else state_or_xbar
    return float(sum(np.linalg.norm(p.eval_h(split(x_bar[i])[0])) for i, p in enumerate(problems)))


def residual(state: SolverState, problems, layout) -> float:
    """Summed norms of the nonlinear-constraint and consensus violations."""
    total = 0.0
    for i, p in enumerate(problems):
        X, _ = split(state.x_bar[i])
        total += float(np.linalg.norm(p.eval_h(X)))
        total += float(np.linalg.norm(consensus_gap(layout, i, state.x_bar[i], state.z)))
    return total


def _displacement_sq(state: SolverState) -> float:
    return float(sum(np.sum((a - b) ** 2) for a, b in zip(state.x_bar, state.x_bar_prev)))


def lyapunov(state: SolverState, problems, layout) -> float:
    return eval_al(state, problems, layout) + state.beta * _displacement_sq(state)


def grad_x_al(problems, layout, x_bar, z, lam, mu, rho) -> list:
    """Per-agent gradients of the augmented Lagrangian with respect to ``X_bar_i``."""
    out = []
    for i, p in enumerate(problems):
        w = mu[i] + rho * consensus_gap(layout, i, x_bar[i], z)
        out.append(grad_g(p, x_bar[i], lam[i], rho) + np.concatenate([w, w]))
    return out


def grad_z_al(layout, x_bar, z, mu, rho) -> Array:
    gz = np.zeros(layout.global_dim)
    for i in range(layout.n_agents):
        layout.scatter(i, -(mu[i] + rho * consensus_gap(layout, i, x_bar[i], z)), gz)
    return gz


def _gamma_norm(state: SolverState, problems, layout) -> float:
    sq = 0.0
    for i, p in enumerate(problems):
        h = p.eval_h(split(state.x_bar[i])[0])
        gap = consensus_gap(layout, i, state.x_bar[i], state.z)
        sq += float(h @ h) + float(gap @ gap)
    return float(np.sqrt(sq))


def subgrad_norms(state: SolverState, problems, layout) -> SubgradNorms:
    """Stationarity measures for the primal, consensus, multiplier and previous-iterate blocks.

    The consensus block is the projected-gradient residual on the box, which
    vanishes exactly when the negative gradient lies in the normal cone.
    """
    gx = grad_x_al(problems, layout, state.x_bar, state.z, state.lam, state.mu, state.rho)
    norm_x = float(np.sqrt(sum(float(v @ v) for v in gx)))
    gz = grad_z_al(layout, state.x_bar, state.z, state.mu, state.rho)
    norm_z = float(np.linalg.norm(state.z - layout.clip(state.z - gz)))
    norm_u = 2.0 * state.beta * float(np.sqrt(_displacement_sq(state)))
    return SubgradNorms(norm_x, norm_z, _gamma_norm(state, problems, layout), norm_u)


def lyapunov_grad_norm(state: SolverState, problems, layout) -> float:
    """Norm of the Lyapunov (sub)gradient, including the ``2 beta (X_bar - U)`` shift on the primal block."""
    gx = grad_x_al(problems, layout, state.x_bar, state.z, state.lam, state.mu, state.rho)
    sq = sum(
        float(np.sum((g + 2.0 * state.beta * (a - b)) ** 2))
        for g, a, b in zip(gx, state.x_bar, state.x_bar_prev)
    )
    norms = subgrad_norms(state, problems, layout)
    return float(np.sqrt(sq + norms.z**2 + norms.gamma**2 + norms.u**2))


def classify_solution(state: SolverState, problems, layout, eps: float) -> Classification:
    """Classify ``state`` as critical, eps-critical or not converged."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    norms = subgrad_norms(state, problems, layout)
    measures = list(norms) + [residual(state, problems, layout)]
    if max(measures) <= CRITICAL_TOL:
        return Classification.CRITICAL
    slack = max(float(np.linalg.norm(split(xb)[1])) for xb in state.x_bar)
    if max(measures) <= eps and slack <= eps:
        return Classification.EPS_CRITICAL
    return Classification.NOT_CONVERGED
