"""
Problem builders: the two-agent toy, a building HVAC model, random
synthetic instances, and a centralized penalty baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import InvalidParams, NoFeasiblePointFound
from .problem import AgentProblem, ConsensusLayout, build_layout

__all__ = [
    "build_toy",
    "HvacParams",
    "build_hvac",
    "hvac_cost",
    "simulate_hvac",
    "build_random",
    "centralized_baseline",
    "ToySolution",
    "RandomCertificateInputs",
]

Array = np.ndarray

#: slack weight of the toy; a weaker weight lets the relaxed optimum drift
#: from the exact one by roughly 5 / weight
TOY_SLACK_PENALTY = 1000.0


class ToySolution(NamedTuple):
    x: Array
    objective: float


def build_toy(slack_penalty: float = TOY_SLACK_PENALTY):
    """Two agents sharing both scalars of ``min x1 + x2 + x1 x2^2``.

    Agent 1 owns ``x1 in [0, 4]`` and enforces ``x1 x2 = 2``; agent 2 owns
    ``x2 in [0, 5]`` and enforces ``x1^2 + x2^2 = 5``. Each agent carries
    its own linear term and half the coupling term on its copies.

    Returns
    -------
    problems, layout, known_solution
    """

    def phi(X):
        return 0.5 * X[0] * X[1] ** 2

    def grad_phi(X):
        return np.array([0.5 * X[1] ** 2, X[0] * X[1]])

    p1 = AgentProblem(
        agent_id=1,
        neighbor_ids=(1, 2),
        dim_own=1,
        box_lower=[0.0],
        box_upper=[4.0],
        f=lambda X: X[0],
        grad_f=lambda X: np.array([1.0, 0.0]),
        phi=phi,
        grad_phi=grad_phi,
        h=lambda X: np.array([X[0] * X[1] - 2.0]),
        jac_h=lambda X: np.array([[X[1], X[0]]]),
        dim_h=1,
        slack_penalty=slack_penalty,
        dim_local=2,
        name="toy-1",
    )
    p2 = AgentProblem(
        agent_id=2,
        neighbor_ids=(1, 2),
        dim_own=1,
        box_lower=[0.0],
        box_upper=[5.0],
        f=lambda X: X[1],
        grad_f=lambda X: np.array([0.0, 1.0]),
        phi=phi,
        grad_phi=grad_phi,
        h=lambda X: np.array([X[0] ** 2 + X[1] ** 2 - 5.0]),
        jac_h=lambda X: np.array([[2.0 * X[0], 2.0 * X[1]]]),
        dim_h=1,
        slack_penalty=slack_penalty,
        dim_local=2,
        name="toy-2",
    )
    problems = [p1, p2]
    return problems, build_layout(problems), ToySolution(np.array([2.0, 1.0]), 5.0)


# ----------------------------------------------------------------------------
# multi-zone HVAC


def _series(value, H, name):
    arr = np.array(value, dtype=float).reshape(-1)
    if arr.size == 1:
        arr = np.full(H, float(arr[0]))
    if arr.shape != (H,):
        raise InvalidParams(f"{name} must have length {H}")
    return arr


@dataclass(frozen=True)
class HvacParams:
    """Parameters of the multi-zone building model.

    Temperatures in degrees Celsius, flows in kg/s, prices per kWh, the
    timestep in hours. ``A_cross[i, j]`` is the thermal coupling of zone
    ``j`` into zone ``i`` and must vanish unless the zones are adjacent.
    ``D[i, t]`` collects outside-air exchange and internal gains.
    """

    zone_count: int
    horizon: int
    A_self: Array
    A_cross: Array
    C: Array
    D: Array
    adjacency: Array
    T_init: Array
    dt: float = 0.25
    prices: Array = 0.2
    c_p: float = 1.005
    d_r: float = 0.8
    kappa_f: float = 0.005
    T_out: Array = 30.0
    T_supply: Array = 15.0
    T_low: float = 24.0
    T_high: float = 26.0
    m_low: float = 0.0
    m_high: float = 0.5

    def __post_init__(self):
        I, H = self.zone_count, self.horizon
        if I < 1 or H < 1:
            raise InvalidParams("zone_count and horizon must be positive")
        conv = {
            "A_self": (I,), "C": (I,), "T_init": (I,),
            "A_cross": (I, I), "adjacency": (I, I), "D": (I, H),
        }
        for name, shape in conv.items():
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != shape:
                raise InvalidParams(f"{name} must have shape {shape}, got {arr.shape}")
            object.__setattr__(self, name, arr)
        for name in ("prices", "T_out", "T_supply"):
            object.__setattr__(self, name, _series(getattr(self, name), H, name))
        adj = self.adjacency.astype(bool)
        if not np.array_equal(adj, adj.T):
            raise InvalidParams("adjacency must be symmetric")
        if np.any(np.diag(adj)):
            raise InvalidParams("adjacency must have an empty diagonal")
        if np.any((self.A_cross != 0) & ~adj):
            raise InvalidParams("A_cross couples non-adjacent zones")
        if not self.T_low < self.T_high:
            raise InvalidParams("T_low must be below T_high")
        if not 0 <= self.m_low < self.m_high:
            raise InvalidParams("flow bounds must satisfy 0 <= m_low < m_high")
        if not 0 <= self.d_r <= 1:
            raise InvalidParams("d_r must lie in [0, 1]")
        if not self.dt > 0:
            raise InvalidParams("dt must be positive")
        for name in ("c_p", "kappa_f"):
            if getattr(self, name) < 0:
                raise InvalidParams(f"{name} must be nonnegative")

    @classmethod
    def generate(cls, zone_count: int = 3, horizon: int = 8, seed: int = 0, **overrides) -> "HvacParams":
        """Seeded random building with a connected thermal-coupling graph.

        Rows of the dynamics satisfy ``A_self + sum(A_cross) ~ 0.9``. The
        uncontrolled equilibrium sits near 27-28 degrees, so some cooling
        flow is needed to stay in the comfort band.
        """
        rng = np.random.default_rng(seed)
        I, H = zone_count, horizon
        adj = np.zeros((I, I), dtype=bool)
        for i in range(I - 1):  # path keeps the graph connected
            adj[i, i + 1] = adj[i + 1, i] = True
        extra = np.triu(rng.random((I, I)) < 0.3, k=2)
        adj |= extra | extra.T
        A_self = rng.uniform(0.78, 0.82, I)
        A_cross = np.zeros((I, I))
        for i in range(I):
            nb = np.nonzero(adj[i])[0]
            if nb.size:
                w = rng.uniform(0.5, 1.0, nb.size)
                A_cross[i, nb] = 0.1 * w / w.sum()
        leak = 1.0 - A_self - A_cross.sum(axis=1)
        t = np.arange(H)
        T_out = 30.0 + 2.0 * np.sin(2.0 * np.pi * t / max(H, 1))
        T_eq = rng.uniform(27.0, 28.0, I)
        D = leak[:, None] * (T_eq[:, None] + 0.1 * (T_out[None, :] - 30.0))
        params = dict(
            zone_count=I,
            horizon=H,
            A_self=A_self,
            A_cross=A_cross,
            C=-rng.uniform(0.2, 0.3, I),
            D=D,
            adjacency=adj,
            T_init=rng.uniform(24.5, 25.5, I),
            T_out=T_out,
        )
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HvacParams":
        return cls(**data)


def simulate_hvac(params: HvacParams, flows: Array) -> Array:
    """Forward-simulate zone temperatures ``T[i, 1..H]`` for flows ``m[i, 0..H-1]``."""
    flows = np.asarray(flows, dtype=float)
    I, H = params.zone_count, params.horizon
    T = np.zeros((I, H + 1))
    T[:, 0] = params.T_init
    for t in range(H):
        cur = T[:, t]
        T[:, t + 1] = (
            params.A_self * cur
            + params.A_cross @ cur
            + params.C * flows[:, t] * (cur - params.T_supply[t])
            + params.D[:, t]
        )
    return T[:, 1:]


def hvac_cost(params: HvacParams, flows: Array, temps: Array) -> float:
    """Energy cost of a flow and temperature plan (``temps`` holds ``T[i, 1..H]``)."""
    flows = np.asarray(flows, dtype=float)
    temps = np.asarray(temps, dtype=float)
    T_now = np.hstack([params.T_init[:, None], temps[:, :-1]])
    w = params.prices * params.dt
    supply = params.c_p * (1.0 - params.d_r) * flows * (params.T_out - params.T_supply)
    ret = params.c_p * params.d_r * flows * (T_now - params.T_supply)
    fan = params.kappa_f * flows.sum(axis=0) ** 3
    return float(np.sum(w * (supply + ret).sum(axis=0)) + np.sum(w * fan))


def _hvac_agent(params: HvacParams, i: int, slack_penalty: float) -> AgentProblem:
    I, H = params.zone_count, params.horizon
    n = 2 * H
    own = slice(i * n, (i + 1) * n)
    w = params.prices * params.dt
    Tc, To = params.T_supply, params.T_out
    cp, dr = params.c_p, params.d_r
    nbrs = np.nonzero(params.A_cross[i])[0]

    def parts(X):
        blk = X[own]
        return blk[:H], blk[H:]

    def temps_now(T):
        return np.concatenate([[params.T_init[i]], T[:-1]])

    def f(X):
        m, T = parts(X)
        return float(np.sum(w * m * (cp * (1 - dr) * (To - Tc) + cp * dr * (temps_now(T) - Tc))))

    def grad_f(X):
        m, T = parts(X)
        g = np.zeros_like(X)
        gm = w * (cp * (1 - dr) * (To - Tc) + cp * dr * (temps_now(T) - Tc))
        gT = np.zeros(H)
        gT[:-1] = w[1:] * cp * dr * m[1:]
        g[own] = np.concatenate([gm, gT])
        return g

    flow_idx = np.array([j * n + t for j in range(I) for t in range(H)]).reshape(I, H)

    def phi(X):
        s = X[flow_idx].sum(axis=0)
        return float(params.kappa_f * np.sum(w * s**3) / I)

    def grad_phi(X):
        s = X[flow_idx].sum(axis=0)
        g = np.zeros_like(X)
        gs = 3.0 * params.kappa_f * w * s**2 / I
        for j in range(I):
            g[flow_idx[j]] = gs
        return g

    def T_of(X, j):
        """Temperatures ``T_0..T_{H-1}`` of zone ``j`` as seen on the copies."""
        blk = X[j * n:(j + 1) * n]
        return np.concatenate([[params.T_init[j]], blk[H:2 * H - 1]])

    def h(X):
        m, T = parts(X)
        Tn = temps_now(T)
        cross = sum(params.A_cross[i, j] * T_of(X, j) for j in nbrs) if nbrs.size else 0.0
        pred = params.A_self[i] * Tn + cross + params.C[i] * m * (Tn - Tc) + params.D[i]
        return T - pred

    def jac_h(X):
        m, T = parts(X)
        Tn = temps_now(T)
        J = np.zeros((H, X.shape[0]))
        base = i * n
        for t in range(H):
            J[t, base + t] = -params.C[i] * (Tn[t] - Tc[t])
            J[t, base + H + t] += 1.0
            if t > 0:
                J[t, base + H + t - 1] -= params.A_self[i] + params.C[i] * m[t]
                for j in nbrs:
                    J[t, j * n + H + t - 1] -= params.A_cross[i, j]
        return J

    return AgentProblem(
        agent_id=i + 1,
        neighbor_ids=tuple(range(1, I + 1)),
        dim_own=n,
        box_lower=np.concatenate([np.full(H, params.m_low), np.full(H, params.T_low)]),
        box_upper=np.concatenate([np.full(H, params.m_high), np.full(H, params.T_high)]),
        f=f,
        grad_f=grad_f,
        phi=phi,
        grad_phi=grad_phi,
        h=h,
        jac_h=jac_h,
        dim_h=H,
        slack_penalty=slack_penalty,
        dim_local=I * n,
        name=f"zone-{i + 1}",
    )


def build_hvac(params: Optional[HvacParams] = None, seed: int = 0, *, slack_penalty: float = 1000.0):
    """One agent per zone; every agent copies all zones (the fan term couples all flows).

    Zone ``i`` owns ``x_i = (m_0..m_{H-1}, T_1..T_H)``, enforces its own
    ``H`` dynamics rows and carries the separable supply and return-air cost
    plus a ``1/I`` share of the fan cost. ``params`` defaults to
    ``HvacParams.generate(seed=seed)``.
    """
    if params is None:
        params = HvacParams.generate(seed=seed)
    problems = [_hvac_agent(params, i, slack_penalty) for i in range(params.zone_count)]
    return problems, build_layout(problems)


# ----------------------------------------------------------------------------
# random synthetic instances


@dataclass(frozen=True)
class RandomCertificateInputs:
    """Feasible anchor of a random instance and the Jacobian regularity there."""

    anchor: Array
    jacobian_min_singular: tuple


def _random_graph(n, density, rng):
    adj = np.zeros((n, n), dtype=bool)
    order = rng.permutation(n)
    for a in range(1, n):  # random spanning tree keeps the graph connected
        b = order[rng.integers(a)]
        adj[order[a], b] = adj[b, order[a]] = True
    extra = np.triu(rng.random((n, n)) < density, k=1)
    adj |= extra | extra.T
    np.fill_diagonal(adj, False)
    return adj


def build_random(
    n_agents: int,
    dims=2,
    density: float = 0.5,
    seed: int = 0,
    *,
    slack_penalty: float = 100.0,
    box: float = 2.0,
):
    """Random connected instance with quartic objectives and quadratic equalities.

    Each agent owns ``dims`` coordinates (an int or one per agent) in
    ``[-box, box]``, holds copies of its graph neighbours, minimizes a
    double-well quartic in its own block plus a bilinear coupling with its
    neighbours, and enforces ``max(1, d // 2)`` quadratic equalities on its
    local vector. The constraints vanish at a common random anchor, where
    their Jacobian has full row rank.

    Returns
    -------
    problems, layout, RandomCertificateInputs
    """
    if n_agents < 1:
        raise ValueError("n_agents must be at least 1")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    d = [int(dims)] * n_agents if np.isscalar(dims) else [int(v) for v in dims]
    if len(d) != n_agents or min(d) < 1:
        raise ValueError("dims must be a positive int or one positive int per agent")
    adj = _random_graph(n_agents, density, rng) if n_agents > 1 else np.zeros((1, 1), dtype=bool)
    offsets = np.concatenate([[0], np.cumsum(d)])
    anchor = rng.uniform(-0.5 * box, 0.5 * box, offsets[-1])

    problems, smin = [], []
    for i in range(n_agents):
        nbrs = sorted([i] + list(np.nonzero(adj[i])[0]))
        idx = np.concatenate([np.arange(offsets[j], offsets[j + 1]) for j in nbrs])
        n_loc = idx.size
        pos = nbrs.index(i)
        start = int(sum(d[j] for j in nbrs[:pos]))
        own = np.arange(start, start + d[i])
        a = rng.uniform(0.5, 1.5, d[i])
        b = rng.uniform(0.5, 1.5, d[i])
        lin = rng.normal(0.0, 0.3, d[i])
        Q = rng.normal(0.0, 0.2, (n_loc, n_loc))
        Q = 0.5 * (Q + Q.T)
        mask = np.ones((n_loc, n_loc), dtype=bool)
        mask[np.ix_(own, own)] = False
        Q = np.where(mask, Q, 0.0)  # coupling only across blocks

        m = max(1, d[i] // 2)
        x0 = anchor[idx]
        for _ in range(100):
            P = rng.normal(0.0, 0.5, (m, n_loc, n_loc))
            P = 0.5 * (P + np.transpose(P, (0, 2, 1)))
            q = rng.normal(0.0, 1.0, (m, n_loc))
            J0 = np.einsum("kab,b->ka", P, x0) + q
            s = np.linalg.svd(J0, compute_uv=False)[-1]
            if s > 1e-2:
                break
        r = 0.5 * np.einsum("a,kab,b->k", x0, P, x0) + q @ x0

        def f(X, own=own, a=a, b=b, lin=lin):
            x = X[own]
            return float(np.sum(0.25 * a * x**4 - 0.5 * b * x**2 + lin * x))

        def grad_f(X, own=own, a=a, b=b, lin=lin):
            g = np.zeros_like(X)
            x = X[own]
            g[own] = a * x**3 - b * x + lin
            return g

        def h(X, P=P, q=q, r=r):
            return 0.5 * np.einsum("a,kab,b->k", X, P, X) + q @ X - r

        def jac_h(X, P=P, q=q):
            return np.einsum("kab,b->ka", P, X) + q

        problems.append(
            AgentProblem(
                agent_id=i + 1,
                neighbor_ids=tuple(j + 1 for j in nbrs),
                dim_own=d[i],
                box_lower=np.full(d[i], -box),
                box_upper=np.full(d[i], box),
                f=f,
                grad_f=grad_f,
                phi=lambda X, Q=Q: float(X @ Q @ X),
                grad_phi=lambda X, Q=Q: 2.0 * Q @ X,
                h=h,
                jac_h=jac_h,
                dim_h=m,
                slack_penalty=slack_penalty,
                dim_local=n_loc,
                name=f"random-{i + 1}",
            )
        )
        smin.append(float(s))
    return problems, build_layout(problems), RandomCertificateInputs(anchor, tuple(smin))


# ----------------------------------------------------------------------------
# centralized baseline


def _penalty_parts(problems, layout: ConsensusLayout):
    def value_grad(z, weight):
        val = 0.0
        grad = np.zeros_like(z)
        for i, p in enumerate(problems):
            X = layout.gather(i, z)
            h = p.eval_h(X)
            val += p.objective(X) + 0.5 * weight * float(h @ h)
            layout.scatter(i, p.objective_grad(X) + weight * (p.eval_jac(X).T @ h), grad)
        return val, grad

    def violation(z):
        return max(
            (float(np.max(np.abs(p.eval_h(layout.gather(i, z))))) for i, p in enumerate(problems) if p.dim_h),
            default=0.0,
        )

    return value_grad, violation


def centralized_baseline(
    problems: Sequence[AgentProblem],
    layout: ConsensusLayout,
    multistart: int = 20,
    seed: int = 0,
    *,
    weight0: float = 1.0,
    growth: float = 10.0,
    rounds: int = 8,
    feas_tol: float = 1e-6,
):
    """Best feasible point of the centralized problem over seeded random starts.

    Each start runs a quadratic-penalty continuation (``rounds`` rounds,
    weight multiplied by ``growth``), minimizing each round over the box
    with L-BFGS-B warm-started from the previous round. A start counts
    when its final equality violation is at most ``feas_tol``; ties go to
    the lowest start index.

    Returns
    -------
    best_x : ndarray
    best_objective : float

    Raises
    ------
    NoFeasiblePointFound
        If no start ends within ``feas_tol``.
    """
    if multistart < 1:
        raise ValueError("multistart must be at least 1")
    rng = np.random.default_rng(seed)
    lo, hi = layout.z_lower, layout.z_upper
    bounds = list(zip(lo, hi))
    value_grad, violation = _penalty_parts(problems, layout)
    best = None
    worst_violation = np.inf
    for _ in range(multistart):
        z = lo + rng.random(lo.size) * (hi - lo)
        weight = weight0
        for _ in range(rounds):
            res = minimize(
                value_grad, z, args=(weight,), jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": 5000, "ftol": 1e-15, "gtol": 1e-10},
            )
            z = np.clip(res.x, lo, hi)
            weight *= growth
        v = violation(z)
        worst_violation = min(worst_violation, v)
        if v > feas_tol:
            continue
        obj = sum(p.objective(layout.gather(i, z)) for i, p in enumerate(problems))
        if best is None or obj < best[1]:
            best = (z, float(obj))
    if best is None:
        raise NoFeasiblePointFound(
            f"no start reached equality violation <= {feas_tol:g} (best {worst_violation:.3g})"
        )
    return best
