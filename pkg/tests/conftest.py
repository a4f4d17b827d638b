import numpy as np
import pytest
from scipy.optimize import fsolve

from pldm import al, instances, solver
from pldm.al import SolverState


@pytest.fixture(scope="session")
def toy():
    return instances.build_toy()


def toy_kkt_state(problems, layout, rho=2.0, beta=0.0):
    """KKT point of the relaxed toy found by a Newton solve of the full stationarity system.

    Unknowns: X_i, Y_i (2 each per agent), Z (2), lambda_i (1 each), mu_i (2 each).
    Equations: AL gradient in X and Y, h = 0, X + Y = Z, sum of mu = 0 (Z interior).
    """
    n = 2

    def unpack(v):
        X = [v[0:2], v[2:4]]
        Y = [v[4:6], v[6:8]]
        Z = v[8:10]
        lam = [v[10:11], v[11:12]]
        mu = [v[12:14], v[14:16]]
        return X, Y, Z, lam, mu

    def eqs(v):
        X, Y, Z, lam, mu = unpack(v)
        out = []
        for i, p in enumerate(problems):
            J = p.eval_jac(X[i])
            out.append(p.objective_grad(X[i]) + J.T @ lam[i] + mu[i])
            out.append(2.0 * p.slack_penalty * Y[i] + mu[i])
            out.append(p.eval_h(X[i]))
            out.append(X[i] + Y[i] - Z)
        out.append(mu[0] + mu[1])
        return np.concatenate(out)

    v0 = np.concatenate([[2, 1, 2, 1], np.zeros(4), [2, 1], [0, 0], np.zeros(4)]).astype(float)
    v = fsolve(eqs, v0, xtol=1e-15)
    X, Y, Z, lam, mu = unpack(v)
    xb = tuple(np.concatenate([X[i], Y[i]]) for i in range(n))
    return SolverState(
        x_bar=xb, x_bar_prev=xb, z=Z, lam=tuple(lam), mu=tuple(mu), rho=rho,
        step_sizes=np.ones(n), beta=beta,
    ), float(np.max(np.abs(eqs(v))))


@pytest.fixture(scope="session")
def toy_kkt(toy):
    problems, layout, _ = toy
    state, err = toy_kkt_state(problems, layout)
    assert err < 1e-12
    return state


@pytest.fixture(scope="session")
def toy_run(toy):
    """Default solver run on the toy from the box midpoint, with history."""
    problems, layout, _ = toy
    return solver.run(problems, layout, solver.SolverConfig())


def quadratic_agent(curvature=2.0, dim=2, lower=-10.0, upper=10.0, slack_penalty=1.0):
    """Single agent with f(x) = curvature/2 ||x||^2 and no constraints."""
    from pldm.problem import AgentProblem

    return AgentProblem(
        agent_id=1, neighbor_ids=(1,), dim_own=dim,
        box_lower=np.full(dim, lower), box_upper=np.full(dim, upper),
        f=lambda x: 0.5 * curvature * float(x @ x), grad_f=lambda x: curvature * np.asarray(x),
        slack_penalty=slack_penalty,
    )


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
