"""
Agent-structured problem description and consensus layout.

Each agent ``i`` owns a block ``x_i`` of the global decision vector and keeps
local copies of the blocks of its neighbours. The stacked local vector
``X_i`` is ordered as ``neighbor_ids`` (which must contain ``i`` itself).
The objective pieces and the coupling constraints of agent ``i`` act on
``X_i``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DegenerateBox, DimensionMismatch, EmptyNetwork, NonFiniteValue

__all__ = [
    "AgentProblem",
    "ConsensusLayout",
    "ConstantsEstimate",
    "build_layout",
    "local_box",
    "validate_gradients",
    "estimate_constants",
    "check_regularity",
    "constraint_matrix",
]

Array = np.ndarray


def _zero(x):
    return 0.0


def _zero_grad(x):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class AgentProblem:
    """One agent's share of the problem.

    Parameters
    ----------
    agent_id : int
        1-based agent index.
    neighbor_ids : sequence of int
        Agents whose blocks are copied locally, including ``agent_id``.
        The order defines the layout of the local vector ``X_i``.
    dim_own : int
        Length of the agent's own block.
    box_lower, box_upper : array_like
        Finite bounds of the own block.
    f, grad_f : callable, optional
        Separable objective part extended to ``X_i`` and its gradient.
    phi, grad_phi : callable, optional
        Coupled objective part on ``X_i`` and its gradient.
    h, jac_h : callable, optional
        Equality constraints ``h(X_i) = 0`` with ``dim_h`` rows and their
        Jacobian of shape ``(dim_h, len(X_i))``.
    slack_penalty : float
        Weight of ``||Y_i||^2`` in the relaxed objective.
    dim_local : int, optional
        Expected length of ``X_i``; checked against the layout when given.
    """

    agent_id: int
    neighbor_ids: tuple
    dim_own: int
    box_lower: Array
    box_upper: Array
    f: Callable = _zero
    grad_f: Callable = _zero_grad
    phi: Callable = _zero
    grad_phi: Callable = _zero_grad
    h: Optional[Callable] = None
    jac_h: Optional[Callable] = None
    dim_h: int = 0
    slack_penalty: float = 1.0
    dim_local: Optional[int] = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "neighbor_ids", tuple(int(j) for j in self.neighbor_ids))
        lo = np.array(self.box_lower, dtype=float).reshape(-1)
        hi = np.array(self.box_upper, dtype=float).reshape(-1)
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "box_lower", lo)
        object.__setattr__(self, "box_upper", hi)
        if self.agent_id not in self.neighbor_ids:
            raise ValueError(f"agent {self.agent_id} must belong to its own neighbor set")
        if len(set(self.neighbor_ids)) != len(self.neighbor_ids):
            raise ValueError(f"agent {self.agent_id}: duplicate neighbor ids")
        if lo.shape != (self.dim_own,) or hi.shape != (self.dim_own,):
            raise DimensionMismatch(
                f"agent {self.agent_id}: box bounds must have length {self.dim_own}"
            )
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError(f"agent {self.agent_id}: box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError(f"agent {self.agent_id}: box_lower exceeds box_upper")
        if not self.slack_penalty > 0:
            raise ValueError(f"agent {self.agent_id}: slack_penalty must be positive")
        if self.dim_h < 0:
            raise ValueError("dim_h must be nonnegative")
        if self.dim_h > 0 and (self.h is None or self.jac_h is None):
            raise ValueError(f"agent {self.agent_id}: dim_h > 0 requires h and jac_h")

    # thin evaluation helpers, shared by the solver and the diagnostics

    def eval_h(self, X: Array) -> Array:
        if self.dim_h == 0:
            return np.zeros(0)
        return np.asarray(self.h(X), dtype=float).reshape(self.dim_h)

    def eval_jac(self, X: Array) -> Array:
        if self.dim_h == 0:
            return np.zeros((0, X.shape[0]))
        return np.asarray(self.jac_h(X), dtype=float).reshape(self.dim_h, X.shape[0])

    def objective(self, X: Array) -> float:
        return float(self.f(X)) + float(self.phi(X))

    def objective_grad(self, X: Array) -> Array:
        return np.asarray(self.grad_f(X), dtype=float) + np.asarray(self.grad_phi(X), dtype=float)


@dataclass(frozen=True, eq=False)
class ConsensusLayout:
    """Index maps realizing the copy matrices ``E_i``.

    ``copy_map[i]`` lists, for every coordinate of agent ``i``'s local vector
    (0-based agent index), the matching coordinate of ``Z``.
    """

    global_dim: int
    offsets: tuple
    dims: tuple
    copy_map: tuple
    copy_count: Array
    z_lower: Array
    z_upper: Array

    @property
    def n_agents(self) -> int:
        return len(self.dims)

    def local_dim(self, i: int) -> int:
        return int(self.copy_map[i].shape[0])

    def own_slice(self, i: int) -> slice:
        return slice(self.offsets[i], self.offsets[i] + self.dims[i])

    def gather(self, i: int, z: Array) -> Array:
        """``E_i Z``."""
        return z[self.copy_map[i]]

    def scatter(self, i: int, v: Array, out: Optional[Array] = None) -> Array:
        """Accumulate ``E_i^T v`` into ``out``."""
        if out is None:
            out = np.zeros(self.global_dim)
        np.add.at(out, self.copy_map[i], v)
        return out

    def clip(self, z: Array) -> Array:
        return np.clip(z, self.z_lower, self.z_upper)


def build_layout(problems: Sequence[AgentProblem]) -> ConsensusLayout:
    """Build the consensus layout of a list of agents ordered by id."""
    if len(problems) == 0:
        raise EmptyNetwork("at least one agent is required")
    ids = [p.agent_id for p in problems]
    if ids != list(range(1, len(problems) + 1)):
        raise ValueError(f"agent ids must be 1..N in order, got {ids}")
    dims = tuple(int(p.dim_own) for p in problems)
    offsets = tuple(int(o) for o in np.concatenate([[0], np.cumsum(dims)[:-1]]))
    n = len(problems)
    copy_map = []
    for p in problems:
        idx = []
        for j in p.neighbor_ids:
            if not 1 <= j <= n:
                raise DimensionMismatch(f"agent {p.agent_id} references unknown agent {j}")
            o = offsets[j - 1]
            idx.extend(range(o, o + dims[j - 1]))
        idx = np.array(idx, dtype=np.intp)
        if p.dim_local is not None and p.dim_local != idx.shape[0]:
            raise DimensionMismatch(
                f"agent {p.agent_id}: declared local dim {p.dim_local}, layout gives {idx.shape[0]}"
            )
        idx.setflags(write=False)
        copy_map.append(idx)
    global_dim = int(sum(dims))
    count = np.zeros(global_dim, dtype=np.intp)
    for idx in copy_map:
        np.add.at(count, idx, 1)
    lower = np.concatenate([p.box_lower for p in problems])
    upper = np.concatenate([p.box_upper for p in problems])
    for a in (count, lower, upper):
        a.setflags(write=False)
    return ConsensusLayout(global_dim, offsets, dims, tuple(copy_map), count, lower, upper)


def local_box(layout: ConsensusLayout, i: int):
    """Bounds of agent ``i``'s local copy vector ``X_i`` (0-based index)."""
    idx = layout.copy_map[i]
    return layout.z_lower[idx], layout.z_upper[idx]


# ----------------------------------------------------------------------------
# derivative checks


def _check_finite(name, value):
    value = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"{name} returned a non-finite value")
    return value


def _rel_err(analytic, numeric):
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1.0)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _central_diff(fun, x, step):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.shape[0]):
        e = np.zeros_like(x)
        e[k] = step
        cols.append((np.asarray(fun(x + e), dtype=float) - np.asarray(fun(x - e), dtype=float)) / (2 * step))
    return np.stack(cols, axis=-1)


def validate_gradients(problem: AgentProblem, point, step: float = 1e-5) -> dict:
    """Compare analytic derivatives with central finite differences.

    Returns the maximum relative error for ``f``, ``phi`` and ``h`` (worst
    Jacobian row). Errors are relative to ``max(|analytic|, |numeric|, 1)``.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    x = np.asarray(point, dtype=float)
    for name, fun in (("f", problem.f), ("phi", problem.phi)):
        _check_finite(name, fun(x))
    report = {}
    for name, fun, grad in (
        ("f", problem.f, problem.grad_f),
        ("phi", problem.phi, problem.grad_phi),
    ):
        g = _check_finite(f"grad_{name}", grad(x))
        fd = _check_finite(name, _central_diff(lambda v: float(fun(v)), x, step))
        report[name] = _rel_err(g, fd)
    if problem.dim_h:
        J = _check_finite("jac_h", problem.eval_jac(x))
        fd = _check_finite("h", _central_diff(problem.eval_h, x, step))
        report["h"] = max(_rel_err(J[r], fd[r]) for r in range(problem.dim_h))
    else:
        report["h"] = 0.0
    return report


# ----------------------------------------------------------------------------
# constants


@dataclass(frozen=True)
class ConstantsEstimate:
    """Smoothness and regularity constants of one agent.

    ``L_*`` are Lipschitz constants of the functions, ``M_h`` of the
    constraint Jacobian, ``C_h`` bounds ``|J^T h|``, ``theta`` is the
    regularity constant of the stacked constraint matrix, ``B`` bounds its
    norm and ``M_gamma`` the multiplier norm.
    """

    L_f: float = 0.0
    L_phi: float = 0.0
    L_h: float = 0.0
    M_h: float = 0.0
    C_h: float = 0.0
    theta: float = 0.0
    B: float = 0.0
    M_gamma: float = 0.0
    slack_penalty: float = 1.0

    def __post_init__(self):
        for name in ("L_f", "L_phi", "L_h", "M_h", "C_h", "theta", "B", "M_gamma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite nonnegative number, got {v}")
        if not self.slack_penalty > 0:
            raise ValueError("slack_penalty must be positive")


def constraint_matrix(problem: AgentProblem, X: Array) -> Array:
    """Stack the constraint Jacobian (padded with zeros over the slacks) on ``[I I]``."""
    n = X.shape[0]
    J = problem.eval_jac(X)
    top = np.hstack([J, np.zeros((J.shape[0], n))])
    eye = np.eye(n)
    return np.vstack([top, np.hstack([eye, eye])])


def _min_row_singular(F: Array) -> float:
    rows, cols = F.shape
    if rows > cols:
        return 0.0
    s = np.linalg.svd(F, compute_uv=False)
    return float(s[-1]) if s.size else 0.0


def check_regularity(problem: AgentProblem, x_bar) -> float:
    """Smallest singular value of the stacked constraint matrix at ``x_bar``.

    A positive value certifies ``|F^T v| >= theta |v|`` for all ``v``.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    if not np.all(np.isfinite(x_bar)):
        raise NonFiniteValue("x_bar contains non-finite entries")
    n = x_bar.shape[0] // 2
    F = constraint_matrix(problem, x_bar[:n])
    if not np.all(np.isfinite(F)):
        raise NonFiniteValue("constraint Jacobian is not finite")
    return _min_row_singular(F)


def estimate_constants(
    problem: AgentProblem,
    sample_count: int,
    seed: int = 0,
    *,
    bounds=None,
) -> ConstantsEstimate:
    """Estimate the constants of ``problem`` by uniform sampling.

    Points are drawn in ``bounds`` (lower, upper arrays of the local vector
    length). Without ``bounds`` the own-block box hull is used for every
    coordinate, which requires the local length to be known via
    ``problem.dim_local``. Lipschitz constants are maxima of difference
    quotients and gradient norms; regularity is the minimum over samples.
    Results are deterministic for a given seed and grow monotonically with
    ``sample_count``.
    """
    if sample_count < 2:
        raise ValueError("sample_count must be at least 2")
    if bounds is None:
        n = problem.dim_local if problem.dim_local is not None else problem.dim_own
        lo = np.full(n, problem.box_lower.min())
        hi = np.full(n, problem.box_upper.max())
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    n = lo.shape[0]
    rng = np.random.default_rng(seed)
    u = rng.random((sample_count, n))
    pts = lo + u * (hi - lo)

    if np.all(hi - lo == 0):
        warnings.warn("sampling box has zero volume; using a point evaluation", DegenerateBox)
        x = lo.copy()
        J = problem.eval_jac(x)
        F = constraint_matrix(problem, x)
        return ConstantsEstimate(
            C_h=float(np.linalg.norm(J.T @ problem.eval_h(x))),
            theta=_min_row_singular(F),
            B=float(np.linalg.norm(F, 2)),
            slack_penalty=problem.slack_penalty,
        )

    fv, pv, hv, Jv = [], [], [], []
    L_f = L_phi = L_h = C_h = B = 0.0
    theta = np.inf
    for x in pts:
        fv.append(float(problem.f(x)))
        pv.append(float(problem.phi(x)))
        L_f = max(L_f, float(np.linalg.norm(problem.grad_f(x))))
        L_phi = max(L_phi, float(np.linalg.norm(problem.grad_phi(x))))
        h = problem.eval_h(x)
        J = problem.eval_jac(x)
        hv.append(h)
        Jv.append(J)
        if J.size:
            L_h = max(L_h, float(np.linalg.norm(J, 2)))
        C_h = max(C_h, float(np.linalg.norm(J.T @ h)))
        F = constraint_matrix(problem, x)
        B = max(B, float(np.linalg.norm(F, 2)))
        theta = min(theta, _min_row_singular(F))
    M_h = 0.0
    for a in range(sample_count - 1):
        d = float(np.linalg.norm(pts[a + 1] - pts[a]))
        if d == 0:
            continue
        L_f = max(L_f, abs(fv[a + 1] - fv[a]) / d)
        L_phi = max(L_phi, abs(pv[a + 1] - pv[a]) / d)
        if problem.dim_h:
            L_h = max(L_h, float(np.linalg.norm(hv[a + 1] - hv[a])) / d)
            M_h = max(M_h, float(np.linalg.norm(Jv[a + 1] - Jv[a], 2)) / d)
    values = np.array([L_f, L_phi, L_h, M_h, C_h, theta, B])
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue("constant estimation produced non-finite values")
    return ConstantsEstimate(
        L_f=L_f, L_phi=L_phi, L_h=L_h, M_h=M_h, C_h=C_h,
        theta=float(theta), B=B, slack_penalty=problem.slack_penalty,
    )
