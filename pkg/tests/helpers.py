"""Shared test helpers."""

import numpy as np

from pldm.al import SolverState


def make_state(problems, layout, x_bar, z, lam=None, mu=None, rho=1.0, beta=0.0, prev=None):
    n = layout.n_agents
    lam = lam if lam is not None else [np.zeros(p.dim_h) for p in problems]
    mu = mu if mu is not None else [np.zeros(layout.local_dim(i)) for i in range(n)]
    return SolverState(
        x_bar=tuple(x_bar), x_bar_prev=tuple(prev if prev is not None else x_bar), z=z,
        lam=tuple(lam), mu=tuple(mu), rho=rho, step_sizes=np.ones(n), beta=beta,
    )


def consensus_point(layout, z):
    return [np.concatenate([layout.gather(i, z), np.zeros(layout.local_dim(i))]) for i in range(layout.n_agents)]


def fd_grad(fun, x, step=1e-6):
    out = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = step
        out[k] = (fun(x + e) - fun(x - e)) / (2 * step)
    return out


def selection_matrix(layout, i):
    E = np.zeros((layout.local_dim(i), layout.global_dim))
    E[np.arange(layout.local_dim(i)), layout.copy_map[i]] = 1.0
    return E


def random_state(problems, layout, rng, rho=None):
    """Arbitrary iterate with copies and slacks inside a loose hull of the box."""
    x_bar, lam, mu = [], [], []
    lo, hi = layout.z_lower.min(), layout.z_upper.max()
    for i, p in enumerate(problems):
        n = layout.local_dim(i)
        x_bar.append(np.concatenate([rng.uniform(lo, hi, n), rng.normal(scale=0.3, size=n)]))
        lam.append(rng.normal(size=p.dim_h))
        mu.append(rng.normal(size=n))
    z = layout.z_lower + rng.random(layout.global_dim) * (layout.z_upper - layout.z_lower)
    n_agents = layout.n_agents
    return SolverState(
        x_bar=tuple(x_bar), x_bar_prev=tuple(x_bar), z=z, lam=tuple(lam), mu=tuple(mu),
        rho=float(rng.uniform(0.5, 5.0) if rho is None else rho),
        step_sizes=rng.uniform(1.0, 10.0, n_agents), beta=0.0,
    )


def z_oracle_lsq(state, layout):
    """Consensus subproblem as a bounded least-squares problem, solved by an active-set method."""
    from scipy.optimize import lsq_linear

    rows, rhs = [], []
    for i in range(layout.n_agents):
        n = layout.local_dim(i)
        v = state.x_bar[i][:n] + state.x_bar[i][n:] + state.mu[i] / state.rho
        rows.append(selection_matrix(layout, i))
        rhs.append(v)
    A, b = np.vstack(rows), np.concatenate(rhs)
    res = lsq_linear(A, b, bounds=(layout.z_lower, layout.z_upper), method="bvls", tol=1e-15)
    return res.x


def z_oracle_projected_gradient(state, layout, steps=100_000):
    """Projected gradient on the consensus subproblem objective."""
    Es = [selection_matrix(layout, i) for i in range(layout.n_agents)]
    vs = []
    for i in range(layout.n_agents):
        n = layout.local_dim(i)
        vs.append(state.x_bar[i][:n] + state.x_bar[i][n:])
    H = state.rho * sum(E.T @ E for E in Es)
    lin = sum(E.T @ (state.mu[i] + state.rho * vs[i]) for i, E in enumerate(Es))
    step = 1.0 / np.max(np.diag(H))
    z = 0.5 * (layout.z_lower + layout.z_upper)
    for _ in range(steps):
        z = np.clip(z - step * (H @ z - lin), layout.z_lower, layout.z_upper)
    return z


def x_system(problem, state, z_new, layout, c, exact_slack, include_grad=True):
    """Dense stationarity system ``K x = r`` of one agent's proximal-linearized subproblem."""
    from pldm.al import grad_g

    i = problem.agent_id - 1
    n = layout.local_dim(i)
    xb = state.x_bar[i]
    A = np.hstack([np.eye(n), np.eye(n)])
    E = selection_matrix(layout, i)
    g = grad_g(problem, xb, state.lam[i], state.rho, include_slack=not exact_slack)
    K = c * np.eye(2 * n) + state.rho * A.T @ A
    if exact_slack:
        K[n:, n:] += 2.0 * problem.slack_penalty * np.eye(n)
    r = c * xb - g + A.T @ (state.rho * E @ z_new - state.mu[i])
    return K, r


def x_oracle_dense(problem, state, z_new, layout, c, exact_slack=False):
    K, r = x_system(problem, state, z_new, layout, c, exact_slack)
    return np.linalg.solve(K, r)


def x_oracle_gradient_descent(Ks, rs, steps=100_000):
    """Batched gradient descent on ``1/2 x'Kx - r'x`` for a stack of systems."""
    Ks = np.asarray(Ks)
    rs = np.asarray(rs)
    lmax = np.max(np.linalg.eigvalsh(Ks), axis=1)[:, None]
    x = np.zeros_like(rs)
    for _ in range(steps):
        x = x - (np.einsum("bij,bj->bi", Ks, x) - rs) / lmax
    return x
