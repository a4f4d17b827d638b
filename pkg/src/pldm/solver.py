"""
Decentralized proximal-linearization iteration.

One iteration updates the consensus vector first, then every agent's stacked
vector in parallel by a closed-form proximal step, then the multipliers and
finally the penalty factor.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import al
from .al import SolverState, consensus_gap, g_value, grad_g, split
from .errors import EmptyCopySet, InfeasibleNu, LinesearchStall, SingularStep, ZeroRegularity
from .problem import AgentProblem, ConsensusLayout, ConstantsEstimate, estimate_constants, local_box

__all__ = [
    "Linesearch",
    "Theoretical",
    "FixedBeta",
    "BetaFromNu",
    "SolverConfig",
    "IterationTrace",
    "RunResult",
    "StepInterval",
    "initial_state",
    "solve_z",
    "primal_x_update",
    "dual_update",
    "adapt_penalty",
    "linesearch_step",
    "theoretical_stepsize",
    "step_interval",
    "linearized_lipschitz",
    "run",
]

log = logging.getLogger(__name__)

Array = np.ndarray


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Linesearch:
    """Backtracking choice of the proximal coefficient.

    ``c`` is divided by ``backtrack_divisor`` (so it grows) until the
    sufficient-decrease test with weight ``alpha`` passes. ``carry`` sets
    where each iteration's search starts:

    ``"relax"``
        one notch below the previously accepted value, ``c_prev *
        backtrack_divisor`` (never below ``c0``); the relaxed trial is only
        accepted on a strict pass, so ``c`` can shrink after a transient
        without drifting down on rounding noise.
    ``"keep"``
        at the previously accepted value, so ``c`` never decreases.
    ``"reset"``
        at ``c0`` every time.
    """

    c0: float = 1.0
    backtrack_divisor: float = 0.5
    alpha: float = 0.1
    max_retries: int = 60
    carry: str = "relax"

    def __post_init__(self):
        if self.carry not in ("relax", "keep", "reset"):
            raise ValueError("carry must be 'relax', 'keep' or 'reset'")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if not 0 < self.backtrack_divisor < 1:
            raise ValueError("backtrack_divisor must lie in (0, 1)")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.max_retries < 1:
            raise ValueError("max_retries must be at least 1")


@dataclass(frozen=True)
class Theoretical:
    """Step sizes from the rate-condition interval for a given ``nu``.

    ``constants`` holds one estimate per agent; when omitted they are
    sampled once at the start of the run. ``fallback`` is the linesearch used
    whenever the interval or the descent window is empty.
    """

    nu: float
    constants: Optional[tuple] = None
    sample_count: int = 200
    fallback: Linesearch = field(default_factory=Linesearch)

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")


@dataclass(frozen=True)
class FixedBeta:
    beta: float = 0.025

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


@dataclass(frozen=True)
class BetaFromNu:
    """Lyapunov weight derived from the ``nu`` of the theoretical step policy."""


@dataclass(frozen=True)
class SolverConfig:
    rho0: float = 1.0
    delta_penalty: float = 1.0
    eta: float = 0.5
    eps_stop: float = 1e-4
    max_iters: int = 2000
    step_policy: Union[Linesearch, Theoretical] = field(default_factory=Linesearch)
    beta_policy: Union[FixedBeta, BetaFromNu] = field(default_factory=FixedBeta)
    seed: int = 0
    slack_treatment: str = "exact"

    def __post_init__(self):
        if self.slack_treatment not in ("exact", "linearized"):
            raise ValueError("slack_treatment must be 'exact' or 'linearized'")
        for name in ("rho0", "delta_penalty", "eta", "eps_stop"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if isinstance(self.beta_policy, BetaFromNu) and not isinstance(self.step_policy, Theoretical):
            raise ValueError("BetaFromNu requires the Theoretical step policy")


@dataclass(frozen=True)
class IterationTrace:
    iter: int
    residual: float
    al_value: float
    lyapunov_value: float
    grad_x: float
    grad_z: float
    grad_gamma: float
    grad_u: float
    rho: float
    step_sizes: tuple
    beta: float
    sum_h: float
    in_region: bool
    wall_time: float

    @property
    def step_min(self) -> float:
        return min(self.step_sizes)

    @property
    def step_max(self) -> float:
        return max(self.step_sizes)


@dataclass
class RunResult:
    """Outcome of :func:`run`; unpacks as ``(state, trace)``."""

    state: SolverState
    trace: List[IterationTrace]
    history: List[SolverState]
    events: List[str]
    first_entry: Optional[int] = None

    def __iter__(self):
        return iter((self.state, self.trace))


# ----------------------------------------------------------------------------
# initialization


def initial_state(
    problems: Sequence[AgentProblem],
    layout: ConsensusLayout,
    config: SolverConfig = SolverConfig(),
    *,
    z0: Optional[Array] = None,
    random: bool = False,
    seed: Optional[int] = None,
) -> SolverState:
    """Starting point with local copies equal to ``Z0`` and zero slacks and multipliers.

    ``Z0`` defaults to the box midpoint; ``random=True`` draws it uniformly in
    the box instead.
    """
    if z0 is None:
        if random:
            rng = np.random.default_rng(config.seed if seed is None else seed)
            z0 = layout.z_lower + rng.random(layout.global_dim) * (layout.z_upper - layout.z_lower)
        else:
            z0 = 0.5 * (layout.z_lower + layout.z_upper)
    z0 = np.asarray(z0, dtype=float)
    x_bar = []
    for i in range(layout.n_agents):
        X = layout.gather(i, z0)
        x_bar.append(np.concatenate([X, np.zeros_like(X)]))
    if isinstance(config.step_policy, Linesearch):
        c0 = config.step_policy.c0
    else:
        c0 = config.step_policy.fallback.c0
    beta = config.beta_policy.beta if isinstance(config.beta_policy, FixedBeta) else 0.0
    return SolverState(
        x_bar=tuple(x_bar),
        x_bar_prev=tuple(x_bar),
        z=z0,
        lam=tuple(np.zeros(p.dim_h) for p in problems),
        mu=tuple(np.zeros(layout.local_dim(i)) for i in range(layout.n_agents)),
        rho=config.rho0,
        step_sizes=np.full(layout.n_agents, c0),
        beta=beta,
    )


# ----------------------------------------------------------------------------
# block updates


def solve_z(state: SolverState, problems, layout: ConsensusLayout) -> Array:
    """Exact minimizer of the consensus subproblem over the box.

    The subproblem separates by coordinate: each global coordinate is the
    average of ``X + Y + mu / rho`` over its copies, clipped to the box.
    """
    if np.any(layout.copy_count == 0):
        raise EmptyCopySet("some global coordinate has no local copy")
    acc = np.zeros(layout.global_dim)
    for i in range(layout.n_agents):
        X, Y = split(state.x_bar[i])
        layout.scatter(i, X + Y + state.mu[i] / state.rho, acc)
    return layout.clip(acc / layout.copy_count)


def primal_x_update(
    problem: AgentProblem,
    state: SolverState,
    z_new: Array,
    layout: ConsensusLayout,
    c: Optional[float] = None,
    *,
    grad: Optional[Array] = None,
    exact_slack: bool = False,
) -> Array:
    """Closed-form minimizer of the proximal-linearized subproblem of one agent.

    The stationarity system couples ``X`` and ``Y`` only through the
    two-block matrix ``[[c+rho, rho], [rho, c+rho]]``, eliminated
    coordinatewise with determinant ``c (c + 2 rho)``.

    With ``exact_slack`` the quadratic ``M ||Y||^2`` is kept in the
    subproblem rather than linearized; the ``Y`` diagonal then becomes
    ``c + rho + 2M`` and ``grad`` must omit the slack term.
    """
    i = problem.agent_id - 1
    c = float(state.step_sizes[i] if c is None else c)
    rho = state.rho
    a = c + rho
    d = a + 2.0 * problem.slack_penalty if exact_slack else a
    det = a * d - rho * rho
    if not (c > 0 and det > 0):
        raise SingularStep(f"agent {problem.agent_id}: singular proximal system (c = {c}, det = {det})")
    xb = state.x_bar[i]
    if grad is None:
        grad = grad_g(problem, xb, state.lam[i], rho, include_slack=not exact_slack)
    X, Y = split(xb)
    gX, gY = split(grad)
    ez = layout.gather(i, z_new)
    base = rho * ez - state.mu[i]
    rX = c * X + base - gX
    rY = c * Y + base - gY
    X_new = (d * rX - rho * rY) / det
    Y_new = (a * rY - rho * rX) / det
    return np.concatenate([X_new, Y_new])


def dual_update(state: SolverState, problems, layout):
    """Multiplier ascent on the constraint and consensus residuals of the installed iterate."""
    lam, mu = [], []
    for i, p in enumerate(problems):
        X, _ = split(state.x_bar[i])
        lam.append(state.lam[i] + state.rho * p.eval_h(X))
        mu.append(state.mu[i] + state.rho * consensus_gap(layout, i, state.x_bar[i], state.z))
    return tuple(lam), tuple(mu)


def adapt_penalty(state: SolverState, problems, config: SolverConfig):
    """Penalty for the next iteration and the index from which the iterates stay in the region.

    The penalty grows by ``delta_penalty`` while the summed constraint
    violation exceeds ``eta``. ``k_underbar`` is the first index of the
    current stretch of in-region iterates and is cleared whenever an iterate
    leaves the region, so on the executed run the penalty is constant and
    the iterates stay inside from ``k_underbar`` on. Returns
    ``(rho_new, k_underbar)``.
    """
    s = al.sum_h(state, problems)
    if s > config.eta:
        return state.rho + config.delta_penalty, None
    k_under = state.iter if state.k_underbar is None else state.k_underbar
    return state.rho, k_under


def linesearch_step(
    problem: AgentProblem,
    state: SolverState,
    z_new: Array,
    layout: ConsensusLayout,
    c_init: float,
    *,
    alpha: float = 0.1,
    backtrack_divisor: float = 0.5,
    max_retries: int = 60,
    exact_slack: bool = False,
    c_floor: float = 0.0,
):
    """Grow ``c`` until the candidate passes the sufficient-decrease test.

    Returns ``(c, candidate)`` where the candidate is computed with the
    accepted ``c``. With ``exact_slack`` the test is applied to the
    linearized part of ``g`` only. Trial values below ``c_floor`` must pass
    the test strictly, without the roundoff allowance, so that a shrinking
    ``c`` is not accepted on rounding noise once the steps vanish.
    """
    i = problem.agent_id - 1
    xb = state.x_bar[i]
    lam = state.lam[i]
    full = not exact_slack
    g0 = g_value(problem, xb, lam, state.rho, full)
    grad = grad_g(problem, xb, lam, state.rho, full)
    c = float(c_init)
    for _ in range(max_retries + 1):
        cand = primal_x_update(problem, state, z_new, layout, c, grad=grad, exact_slack=exact_slack)
        d = cand - xb
        dd = float(d @ d)
        lhs = g_value(problem, cand, lam, state.rho, full) + alpha * dd
        rhs = g0 + float(grad @ d) + 0.5 * c * dd
        # roundoff allowance so that vanishing steps are not rejected
        slack = 0.0 if c < c_floor else 8 * np.finfo(float).eps * (abs(g0) + 1.0)
        if lhs <= rhs + slack:
            return c, cand
        c = c / backtrack_divisor
    raise LinesearchStall(
        f"agent {problem.agent_id}: no acceptable step after {max_retries} retries (c = {c:.3g})"
    )


# ----------------------------------------------------------------------------
# theory-driven step sizes


class StepInterval(NamedTuple):
    lo: float
    hi: float
    beta: float
    M: float
    L: float


def linearized_lipschitz(k: ConstantsEstimate, rho: float, exact_slack: bool = False) -> float:
    """Lipschitz constant of the linearized part of ``g``."""
    L_g = k.L_f + k.L_phi + k.M_gamma * k.L_h + rho * k.C_h
    return L_g if exact_slack else max(L_g, 2.0 * k.slack_penalty)


def _agent_constants(k: ConstantsEstimate, rho, c, c_prev, exact_slack=False):
    if not k.theta > 0:
        raise ZeroRegularity("regularity constant theta must be positive")
    L_g = linearized_lipschitz(k, rho, exact_slack)
    omega1 = (L_g + c + k.L_f + k.L_phi + k.M_h * k.M_gamma) / k.theta
    omega2 = (L_g + c_prev) / k.theta
    return L_g, omega1, omega2


def theoretical_stepsize(
    constants: Sequence[ConstantsEstimate],
    nu: float,
    rho: float,
    beta_next: float,
    c_prev: Optional[Sequence[float]] = None,
    *,
    exact_slack: bool = False,
) -> StepInterval:
    """Step-size interval guaranteeing the rate condition for ``nu``.

    The interval collects the ``c > 0`` with ``(c + L)^2 <= nu (c/2 - M)``.
    ``M`` and ``L`` are evaluated with the step-independent part of the
    first multiplier-drift constant (``c = 0``). Also returns the Lyapunov
    weight tied to ``nu``.
    """
    if c_prev is None:
        c_prev = [0.0] * len(constants)
    Ms, Ls, om2 = [], [], []
    for k, cp in zip(constants, c_prev):
        L_g, o1, o2 = _agent_constants(k, rho, 0.0, cp, exact_slack)
        Ms.append(0.5 * L_g + 2.0 * o1**2 / rho + beta_next)
        Ls.append(L_g + o1 * k.B + 4.0 * beta_next + rho + o1 / rho)
        om2.append(o2)
    M, L = max(Ms), max(Ls)
    B = max(k.B for k in constants)
    beta = 2.0 * ((1.0 + B * rho) ** 2 + nu) / (nu * rho) * max(om2) ** 2
    lo, hi = step_interval(M, L, nu)
    return StepInterval(lo, hi, beta, M, L)


def step_interval(M: float, L: float, nu: float):
    """Nonnegative ``c`` with ``(c + L)^2 <= nu (c/2 - M)``, as ``(lo, hi)``.

    The quadratic has real roots ``(nu - 4L +/- sqrt(nu^2 - (16M + 8L) nu)) / 4``
    once ``nu >= 16M + 8L``.
    """
    if not nu > 0:
        raise InfeasibleNu("nu must be positive")
    disc = nu * nu - (16.0 * M + 8.0 * L) * nu
    if disc < 0:
        raise InfeasibleNu(f"nu = {nu:.6g} is below the threshold {16.0 * M + 8.0 * L:.6g}")
    root = np.sqrt(disc)
    lo = (nu - 4.0 * L - root) / 4.0
    hi = (nu - 4.0 * L + root) / 4.0
    if hi < 0:
        raise InfeasibleNu("the step-size interval has no nonnegative point")
    return max(lo, 0.0), hi


def _condition_a_window(constants, rho, c, c_prev, exact_slack):
    lo, hi = -np.inf, np.inf
    for k, ci, cp in zip(constants, c, c_prev):
        L_g, o1, o2 = _agent_constants(k, rho, ci, cp, exact_slack)
        lo = max(lo, 2.0 * o2**2 / rho)
        hi = min(hi, 0.5 * (ci - L_g) - 2.0 * o1**2 / rho)
    return lo, hi


# ----------------------------------------------------------------------------
# main loop


def _threads() -> int:
    try:
        return max(0, int(os.environ.get("PLDM_THREADS", "0")))
    except ValueError:
        return 0


def _trace_row(state, problems, layout, eta, t0) -> IterationTrace:
    norms = al.subgrad_norms(state, problems, layout)
    s = al.sum_h(state, problems)
    return IterationTrace(
        iter=state.iter,
        residual=al.residual(state, problems, layout),
        al_value=al.eval_al(state, problems, layout),
        lyapunov_value=al.lyapunov(state, problems, layout),
        grad_x=norms.x,
        grad_z=norms.z,
        grad_gamma=norms.gamma,
        grad_u=norms.u,
        rho=state.rho,
        step_sizes=tuple(float(c) for c in state.step_sizes),
        beta=state.beta,
        sum_h=s,
        in_region=bool(s <= eta),
        wall_time=time.perf_counter() - t0,
    )


def run(
    problems: Sequence[AgentProblem],
    layout: ConsensusLayout,
    config: SolverConfig = SolverConfig(),
    init: Optional[SolverState] = None,
    *,
    keep_history: bool = True,
    threads: Optional[int] = None,
) -> RunResult:
    """Iterate until the residual drops to ``eps_stop`` or ``max_iters`` is reached.

    ``threads`` (default: the ``PLDM_THREADS`` environment variable, 0 for
    sequential) caps the number of concurrent agent updates; results do not
    depend on it.
    """
    state = initial_state(problems, layout, config) if init is None else init
    state.validate(problems, layout)
    threads = _threads() if threads is None else threads
    policy = config.step_policy
    exact = config.slack_treatment == "exact"
    events: List[str] = []
    history = [state] if keep_history else []
    trace: List[IterationTrace] = []
    t0 = time.perf_counter()
    first_entry = state.k_underbar

    constants = None
    if isinstance(policy, Theoretical):
        constants = policy.constants
        if constants is None:
            constants = tuple(
                estimate_constants(p, policy.sample_count, config.seed + i, bounds=local_box(layout, i))
                for i, p in enumerate(problems)
            )

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 0 else None
    try:
        for _ in range(config.max_iters):
            k = state.iter
            z_new = solve_z(state, problems, layout)
            c_prev = state.step_sizes

            if isinstance(policy, Theoretical):
                c_fixed, beta_next, search = _theoretical_choice(
                    policy, constants, state, config, events
                )
            else:
                c_fixed, beta_next, search = None, None, policy

            def agent_step(i):
                p = problems[i]
                if search is None:
                    return c_fixed[i], primal_x_update(p, state, z_new, layout, c_fixed[i], exact_slack=exact)
                c_init, c_floor = search.c0, 0.0
                if search.carry != "reset" and state.iter > 0:
                    c_floor = max(search.c0, c_prev[i])
                    c_init = c_floor
                    if search.carry == "relax":
                        c_init = max(search.c0, c_prev[i] * search.backtrack_divisor)
                return linesearch_step(
                    p, state, z_new, layout, c_init,
                    alpha=search.alpha,
                    backtrack_divisor=search.backtrack_divisor,
                    max_retries=search.max_retries,
                    exact_slack=exact,
                    c_floor=c_floor,
                )

            if pool is None:
                results = [agent_step(i) for i in range(len(problems))]
            else:
                results = list(pool.map(agent_step, range(len(problems))))
            steps = np.array([r[0] for r in results])
            x_new = tuple(r[1] for r in results)

            staged = state.replace(x_bar=x_new, x_bar_prev=state.x_bar, z=z_new, step_sizes=steps, iter=k + 1)
            lam, mu = dual_update(staged, problems, layout)
            staged = staged.replace(lam=lam, mu=mu)
            rho_new, k_under = adapt_penalty(staged, problems, config)
            if beta_next is None:
                beta_next = (
                    config.beta_policy.beta if isinstance(config.beta_policy, FixedBeta) else state.beta
                )
            if k_under is not None and first_entry is None:
                first_entry = k_under
            if k_under is None and state.k_underbar is not None:
                events.append(f"iter {k + 1}: left the sub-feasible region; penalty grows again")
            state = staged.replace(rho=rho_new, k_underbar=k_under, beta=beta_next)

            row = _trace_row(state, problems, layout, config.eta, t0)
            trace.append(row)
            if keep_history:
                history.append(state)
            if not np.isfinite(row.residual):
                events.append(f"iter {state.iter}: non-finite residual, stopping")
                break
            if row.residual <= config.eps_stop:
                break
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(state, trace, history, events, first_entry)


def _theoretical_choice(policy: Theoretical, constants, state: SolverState, config, events):
    """Step sizes and Lyapunov weight for one iteration, or the fallback linesearch."""
    beta_now = state.beta
    if isinstance(config.beta_policy, FixedBeta):
        beta_now = config.beta_policy.beta
    exact = config.slack_treatment == "exact"
    try:
        iv = theoretical_stepsize(
            constants, policy.nu, state.rho, beta_now, state.step_sizes, exact_slack=exact
        )
    except InfeasibleNu as exc:
        events.append(f"iter {state.iter + 1}: {exc}; using linesearch")
        return None, None, policy.fallback
    c = iv.lo if iv.lo > 0 else 0.5 * iv.hi
    if not c > 0:
        events.append(f"iter {state.iter + 1}: step-size interval is the single point 0; using linesearch")
        return None, None, policy.fallback
    steps = np.full(len(constants), c)
    beta = iv.beta if isinstance(config.beta_policy, BetaFromNu) else beta_now
    lo, hi = _condition_a_window(constants, state.rho, steps, state.step_sizes, exact)
    if not lo < hi:
        events.append(f"iter {state.iter + 1}: empty descent window for beta; using linesearch")
        return None, None, policy.fallback
    return steps, beta, None
