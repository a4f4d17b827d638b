"""
Post-hoc convergence certificates and empirical rate fitting.

The certificates re-evaluate the descent, subgradient, multiplier-drift and
Lyapunov inequalities of the convergence analysis on a recorded run, using
sampled smoothness and regularity constants. Violations are reported through
margins, never raised: sampled constants can underestimate the true suprema.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from . import al
from .al import SolverState, consensus_gap, split
from .errors import InsufficientHistory, NonMonotoneTail, ZeroRegularity
from .problem import ConstantsEstimate, check_regularity, constraint_matrix
from .solver import IterationTrace, linearized_lipschitz

__all__ = [
    "DerivedConstants",
    "CertificateRow",
    "CertificateReport",
    "derive_constants",
    "check_certificates",
    "FiniteTermination",
    "Linear",
    "Sublinear",
    "fit_rate",
    "CERTIFICATES",
]

Array = np.ndarray

CERTIFICATES = ("descent", "subgradient", "multiplier_drift", "lyapunov_decrease", "lyapunov_subgradient",
                "condition_a", "condition_b")

# relative slack of the "holds" test
HOLD_TOL = 1e-9


@dataclass(frozen=True)
class DerivedConstants:
    """Per-agent ``L_g``, ``Omega1``, ``Omega2`` and the network-wide ``b1..b4``."""

    L_g: Array
    omega1: Array
    omega2: Array
    b1: float
    b2: float
    b3: float
    b4: float

    @property
    def nu(self) -> float:
        """Left-hand ratio ``b4^2 / b2`` of the rate condition (``inf`` when ``b2 <= 0``)."""
        return self.b4**2 / self.b2 if self.b2 > 0 else np.inf

    @property
    def nu_bound(self) -> float:
        """Right-hand ratio ``b3^2 / b1`` (``-inf`` when ``b1 <= 0``)."""
        return self.b3**2 / self.b1 if self.b1 > 0 else -np.inf


def _as_list(constants, n):
    if isinstance(constants, ConstantsEstimate):
        return [constants] * n
    constants = list(constants)
    if len(constants) != n:
        raise ValueError(f"expected {n} constant estimates, got {len(constants)}")
    return constants


def derive_constants(
    constants: Union[ConstantsEstimate, Sequence[ConstantsEstimate]],
    state: SolverState,
    *,
    c_prev: Optional[Sequence[float]] = None,
    beta_prev: Optional[float] = None,
    exact_slack: bool = False,
    L_g_override: Optional[float] = None,
) -> DerivedConstants:
    """Evaluate the analysis constants at ``state``.

    Uses ``rho = state.rho``, the step sizes ``c = state.step_sizes`` that
    produced ``state``, ``beta_next = state.beta`` and the previous step
    sizes and weight (``c_prev``, ``beta_prev``; default: the current ones).

    Raises
    ------
    ZeroRegularity
        If some agent has ``theta == 0``.
    """
    n = len(state.x_bar)
    ks = _as_list(constants, n)
    c = np.asarray(state.step_sizes, dtype=float)
    cp = c if c_prev is None else np.asarray(c_prev, dtype=float)
    rho = state.rho
    beta_next = state.beta
    beta = beta_next if beta_prev is None else beta_prev
    L_g, o1, o2 = np.zeros(n), np.zeros(n), np.zeros(n)
    b1 = b2 = np.inf
    b3 = b4 = -np.inf
    for i, k in enumerate(ks):
        if not k.theta > 0:
            raise ZeroRegularity(f"agent {i + 1}: theta must be positive")
        lg = linearized_lipschitz(k, rho, exact_slack) if L_g_override is None else float(L_g_override)
        L_g[i] = lg
        o1[i] = (lg + c[i] + k.L_f + k.L_phi + k.M_h * k.M_gamma) / k.theta
        o2[i] = (lg + cp[i]) / k.theta
        b1 = min(b1, 0.5 * (c[i] - lg) - 2.0 * o1[i] ** 2 / rho - beta_next)
        b2 = min(b2, beta - 2.0 * o2[i] ** 2 / rho)
        b3 = max(b3, lg + c[i] + o1[i] * k.B + 4.0 * beta_next + rho + o1[i] / rho)
        b4 = max(b4, (k.B + 1.0 / rho) * o2[i])
    return DerivedConstants(L_g, o1, o2, float(b1), float(b2), float(b3), float(b4))


class CertificateRow(NamedTuple):
    iter: int
    name: str
    agent: Optional[int]
    lhs: float
    rhs: float
    margin: float
    holds: bool


@dataclass
class CertificateReport:
    """Margins of every certificate at every checked iteration.

    A row's margin is ``rhs - lhs`` for upper bounds (``lhs <= rhs``); it
    holds iff the margin is at least ``-1e-9 * max(|lhs|, |rhs|, 1)``; the
    Lyapunov decrease uses ``-1e-9 * max(|Phi_k|, |Phi_{k+1}|)``.
    """

    rows: List[CertificateRow] = field(default_factory=list)
    derived: Dict[int, DerivedConstants] = field(default_factory=dict)
    k_underbar: Optional[int] = None
    constants: Optional[list] = None

    def of(self, name: str) -> List[CertificateRow]:
        return [r for r in self.rows if r.name == name]

    def pass_rate(self, name: str) -> float:
        rows = self.of(name)
        return float(np.mean([r.holds for r in rows])) if rows else float("nan")

    def all_hold(self, name: str) -> bool:
        return all(r.holds for r in self.of(name))

    def summary(self) -> Dict[str, float]:
        return {name: self.pass_rate(name) for name in CERTIFICATES if self.of(name)}


def _row(k, name, agent, lhs, rhs):
    lhs, rhs = float(lhs), float(rhs)
    margin = rhs - lhs
    scale = max(abs(lhs), abs(rhs), 1.0)
    holds = bool(np.isfinite(margin) and margin >= -HOLD_TOL * scale) or (lhs == rhs)
    return CertificateRow(k, name, agent, lhs, rhs, margin, holds)


def _monitored_constants(constants, problems, history, k0):
    """Raise ``M_gamma`` and ``B`` and lower ``theta`` to what the recorded tail exhibits."""
    out = []
    for i, (k, p) in enumerate(zip(constants, problems)):
        m_gamma, B, theta = k.M_gamma, k.B, k.theta
        for s in history[k0:]:
            gamma = np.concatenate([s.lam[i], s.mu[i]])
            m_gamma = max(m_gamma, float(np.linalg.norm(gamma)))
            X, _ = split(s.x_bar[i])
            B = max(B, float(np.linalg.norm(constraint_matrix(p, X), 2)))
            theta = min(theta, check_regularity(p, s.x_bar[i]))
        out.append(
            ConstantsEstimate(
                L_f=k.L_f, L_phi=k.L_phi, L_h=k.L_h, M_h=k.M_h, C_h=k.C_h,
                theta=theta, B=B, M_gamma=m_gamma, slack_penalty=k.slack_penalty,
            )
        )
    return out


def check_certificates(
    trace: Sequence[IterationTrace],
    states_history: Sequence[SolverState],
    constants: Union[ConstantsEstimate, Sequence[ConstantsEstimate]],
    problems,
    layout,
    *,
    k_underbar: Optional[int] = None,
    exact_slack: bool = False,
    L_g_override: Optional[float] = None,
    monitor: bool = True,
) -> CertificateReport:
    """Evaluate the certificates on iterations ``k >= k_underbar``.

    ``states_history[k]`` must be the iterate after ``k`` iterations (index
    0 is the initial point), so it has one more entry than ``trace``.
    ``k_underbar`` defaults to the value recorded in the final state. With
    ``monitor`` the multiplier bound and the norm bound of the constraint
    matrix are raised, and the regularity constant lowered, to the values
    observed on the checked tail.

    Raises
    ------
    InsufficientHistory
        If fewer than three snapshots lie in the checked tail.
    """
    history = list(states_history)
    if trace is not None and len(trace) and len(history) != len(trace) + 1:
        raise InsufficientHistory("states_history must hold the initial point and one state per trace row")
    if k_underbar is None:
        k_underbar = history[-1].k_underbar if history else None
    if k_underbar is None:
        raise InsufficientHistory("the run never entered the sub-feasible region")
    k0 = int(k_underbar)
    if len(history) - k0 < 3:
        raise InsufficientHistory(f"need at least 3 snapshots from k = {k0}, have {len(history) - k0}")
    ks = _as_list(constants, len(problems))
    if monitor:
        ks = _monitored_constants(ks, problems, history, k0)
    report = CertificateReport(k_underbar=k0, constants=ks)

    for k in range(k0 + 1, len(history) - 1):
        prev, cur, nxt = history[k - 1], history[k], history[k + 1]
        dc = derive_constants(
            ks, nxt, c_prev=cur.step_sizes, beta_prev=cur.beta,
            exact_slack=exact_slack, L_g_override=L_g_override,
        )
        report.derived[k + 1] = dc
        d_next = [a - b for a, b in zip(nxt.x_bar, cur.x_bar)]
        d_cur = [a - b for a, b in zip(cur.x_bar, prev.x_bar)]
        sq_next = float(sum(d @ d for d in d_next))
        sq_cur = float(sum(d @ d for d in d_cur))
        c = np.asarray(nxt.step_sizes)

        # descent of the augmented Lagrangian under the primal update, old multipliers
        args_old = (cur.lam, cur.mu, cur.rho)
        l_next = al.augmented_lagrangian(problems, layout, nxt.x_bar, nxt.z, *args_old)
        l_cur = al.augmented_lagrangian(problems, layout, cur.x_bar, cur.z, *args_old)
        decrease = sum(0.5 * (c[i] - dc.L_g[i]) * float(d_next[i] @ d_next[i]) for i in range(len(problems)))
        report.rows.append(_row(k + 1, "descent", None, l_next, l_cur - decrease))

        grads = al.grad_x_al(problems, layout, nxt.x_bar, nxt.z, cur.lam, cur.mu, cur.rho)
        for i in range(len(problems)):
            dn = float(np.linalg.norm(d_next[i]))
            dp = float(np.linalg.norm(d_cur[i]))
            report.rows.append(
                _row(k + 1, "subgradient", i + 1, np.linalg.norm(grads[i]), (dc.L_g[i] + c[i]) * dn)
            )
            dgamma = np.concatenate([nxt.lam[i] - cur.lam[i], nxt.mu[i] - cur.mu[i]])
            report.rows.append(
                _row(k + 1, "multiplier_drift", i + 1, np.linalg.norm(dgamma),
                     dc.omega1[i] * dn + dc.omega2[i] * dp)
            )

        phi_cur = al.lyapunov(cur, problems, layout)
        phi_next = al.lyapunov(nxt, problems, layout)
        # Phi_k - Phi_{k+1} >= b1 |d_next|^2 + b2 |d_cur|^2, written as lhs <= rhs
        lower = dc.b1 * sq_next + dc.b2 * sq_cur
        row = _row(k + 1, "lyapunov_decrease", None, phi_next + lower, phi_cur)
        scale = max(abs(phi_cur), abs(phi_next))
        margin = (phi_cur - phi_next) - lower
        report.rows.append(row._replace(margin=margin, holds=bool(margin >= -HOLD_TOL * scale)))

        sum_next = float(sum(np.linalg.norm(d) for d in d_next))
        sum_cur = float(sum(np.linalg.norm(d) for d in d_cur))
        report.rows.append(
            _row(k + 1, "lyapunov_subgradient", None, al.lyapunov_grad_norm(nxt, problems, layout),
                 dc.b3 * sum_next + dc.b4 * sum_cur)
        )

        lo = float(np.max(2.0 * dc.omega2**2 / nxt.rho))
        hi = float(np.min(0.5 * (c - dc.L_g) - 2.0 * dc.omega1**2 / nxt.rho))
        beta = cur.beta
        margin_a = min(beta - lo, hi - beta)
        report.rows.append(CertificateRow(k + 1, "condition_a", None, lo, hi, margin_a, bool(lo < beta < hi)))
        report.rows.append(_row(k + 1, "condition_b", None, dc.nu, dc.nu_bound))
    return report


# ----------------------------------------------------------------------------
# rate fitting


class FiniteTermination(NamedTuple):
    iteration: int


class Linear(NamedTuple):
    q: float


class Sublinear(NamedTuple):
    exponent: float


def _lyapunov_values(trace) -> Array:
    if len(trace) and isinstance(trace[0], IterationTrace):
        return np.array([t.lyapunov_value for t in trace], dtype=float)
    return np.asarray(trace, dtype=float)


def _fit(x, y):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    pred = A @ coef
    ss = float(np.sum((y - pred) ** 2))
    tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss / tot if tot > 0 else 1.0
    return float(coef[0]), r2


def fit_rate(
    trace,
    phi_star: Optional[float] = None,
    *,
    tail_start: int = 0,
    exact_tol: float = 1e-14,
    growth_tol: float = 1e-6,
):
    """Classify the decay of ``Delta_k = Phi_k - Phi*``.

    ``trace`` is a list of :class:`IterationTrace` rows or a plain sequence
    of Lyapunov values; rows before ``tail_start`` are ignored. When
    ``phi_star`` is omitted the final value stands in for it;
    the limit is best supplied from a longer run of the same sequence.

    The fit uses the upper envelope ``E_k = max_{j >= k} |Delta_j|``, so it
    measures root (R-)convergence: a sequence that spirals in to its limit
    is classified by how fast its amplitude shrinks. The window ends where
    ``E`` falls to ten times its floor (its final value, or with an
    estimated ``phi_star`` the largest ``|Delta|`` over the last fifth of the
    tail); below that the offset between ``phi_star`` and the true limit
    dominates. ``log E`` is regressed on the
    iteration index ``k`` and on ``log k``: the better fit decides between
    ``Linear(q = exp(slope))`` and ``Sublinear(exponent = slope)``.

    Returns
    -------
    FiniteTermination(iteration), Linear(q) or Sublinear(exponent)

    Raises
    ------
    InsufficientHistory
        If fewer than 10 values remain.
    NonMonotoneTail
        If ``|Delta|`` over the later half of the tail exceeds its maximum
        over the earlier half, i.e. the tail is not decaying.
    """
    phi = _lyapunov_values(trace)[tail_start:]
    if phi.size < 10:
        raise InsufficientHistory("fit_rate needs at least 10 values")
    estimated = phi_star is None
    if estimated:
        phi_star = float(phi[-1])
    delta = np.abs(phi - phi_star)
    scale = max(1.0, abs(phi_star))

    hit = np.nonzero(delta <= exact_tol * scale)[0]
    if hit.size and hit[0] < phi.size - 1 and np.all(delta[hit[0]:] <= exact_tol * scale):
        return FiniteTermination(int(hit[0]) + tail_start)

    half = delta.size // 2
    if np.max(delta[half:]) > (1.0 + growth_tol) * np.max(delta[:half]) + exact_tol * scale:
        raise NonMonotoneTail("the tail of Phi - Phi* does not decay")

    env = np.maximum.accumulate(delta[::-1])[::-1]
    # keep the part of the tail that is not dominated by the final offset
    floor = max(env[-1], exact_tol * scale)
    if estimated:
        floor = max(floor, float(np.max(delta[-max(2, delta.size // 5):])))
    stop = int(np.count_nonzero(env >= 10.0 * floor))
    if stop < 10:
        stop = delta.size
    k = np.arange(stop, dtype=float) + tail_start + 1.0
    log_a = np.log(np.maximum(env[:stop], np.finfo(float).tiny))
    slope_lin, r2_lin = _fit(k, log_a)
    slope_pow, r2_pow = _fit(np.log(k), log_a)
    if slope_lin < 0 and r2_lin >= r2_pow:
        return Linear(float(np.exp(slope_lin)))
    return Sublinear(float(slope_pow))
