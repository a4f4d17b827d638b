import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pldm import diagnostics as D
from pldm import solver
from pldm.errors import InsufficientHistory, NonMonotoneTail, ZeroRegularity
from pldm.problem import ConstantsEstimate, estimate_constants, local_box


def state_with(c, rho=2.0, beta=0.1, n=1):
    from pldm.al import SolverState

    xb = tuple(np.zeros(2) for _ in range(n))
    return SolverState(x_bar=xb, x_bar_prev=xb, z=np.zeros(n), lam=tuple(np.zeros(0) for _ in range(n)),
                       mu=tuple(np.zeros(1) for _ in range(n)), rho=rho,
                       step_sizes=np.full(n, float(c)), beta=beta)


# ---------------------------------------------------------------- derived constants

def test_lg_takes_slack_branch():
    k = ConstantsEstimate(theta=1.0, slack_penalty=1.0)
    dc = D.derive_constants(k, state_with(3.0))
    assert dc.L_g[0] == pytest.approx(2.0)


def test_omega2_arithmetic():
    k = ConstantsEstimate(theta=0.5, slack_penalty=1.0)
    dc = D.derive_constants(k, state_with(1.0), c_prev=[3.0])
    assert dc.omega2[0] == pytest.approx((2.0 + 3.0) / 0.5) == pytest.approx(10.0)


def test_b1_crossing_point():
    k = ConstantsEstimate(L_f=0.5, L_phi=0.5, M_h=1.0, M_gamma=1.0, theta=20.0, slack_penalty=1.0)
    rho, beta = 2.0, 0.1
    L_g = 2.0
    K = k.L_f + k.L_phi + k.M_h * k.M_gamma
    # b1(c) = (c - L_g)/2 - 2 ((L_g + c + K)/theta)^2 / rho - beta, a concave quadratic in c
    a2 = -2.0 / (k.theta**2 * rho)
    a1 = 0.5 - 4.0 * (L_g + K) / (k.theta**2 * rho)
    a0 = -0.5 * L_g - 2.0 * (L_g + K) ** 2 / (k.theta**2 * rho) - beta
    root = np.min(np.roots([a2, a1, a0]).real)
    b1 = lambda c: D.derive_constants(k, state_with(c, rho, beta)).b1
    assert b1(root) == pytest.approx(0.0, abs=1e-9)
    assert b1(root - 1e-3) < 0 < b1(root + 1e-3)


def test_zero_regularity_raises():
    with pytest.raises(ZeroRegularity):
        D.derive_constants(ConstantsEstimate(theta=0.0), state_with(1.0))


_names = ["L_f", "L_phi", "L_h", "M_h", "C_h", "M_gamma", "B"]


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(0, 5), min_size=7, max_size=7),
    st.sampled_from(_names),
    st.floats(0.01, 3),
    st.booleans(),
)
def test_derived_constants_monotone(values, name, bump, exact):
    base = ConstantsEstimate(**dict(zip(_names, values)), theta=0.7, slack_penalty=1.5)
    bigger = ConstantsEstimate(**{**base.__dict__, name: getattr(base, name) + bump})
    s = state_with(4.0, rho=1.5, beta=0.2)
    a = D.derive_constants(base, s, c_prev=[2.0], exact_slack=exact)
    b = D.derive_constants(bigger, s, c_prev=[2.0], exact_slack=exact)
    for field in ("L_g", "omega1", "omega2"):
        assert np.all(getattr(b, field) >= getattr(a, field) - 1e-12)
    assert b.b3 >= a.b3 - 1e-12 and b.b4 >= a.b4 - 1e-12
    assert b.b1 <= a.b1 + 1e-12 and b.b2 <= a.b2 + 1e-12


def test_condition_b_ratio_recomputed_from_raw_inputs():
    k = ConstantsEstimate(L_f=0.3, L_phi=0.2, L_h=1.0, M_h=0.4, C_h=0.5, theta=2.0, B=1.5, M_gamma=0.8)
    rho, beta, c, cp = 3.0, 5.0, 40.0, 30.0
    dc = D.derive_constants(k, state_with(c, rho, beta), c_prev=[cp])
    L_g = max(k.L_f + k.L_phi + k.M_gamma * k.L_h + rho * k.C_h, 2.0 * k.slack_penalty)
    o1 = (L_g + c + k.L_f + k.L_phi + k.M_h * k.M_gamma) / k.theta
    o2 = (L_g + cp) / k.theta
    b1 = 0.5 * (c - L_g) - 2 * o1**2 / rho - beta
    b2 = beta - 2 * o2**2 / rho
    b3 = L_g + c + o1 * k.B + 4 * beta + rho + o1 / rho
    b4 = (k.B + 1 / rho) * o2
    assert (dc.b1, dc.b2, dc.b3, dc.b4) == pytest.approx((b1, b2, b3, b4), rel=1e-14)
    nu = b4**2 / b2 if b2 > 0 else np.inf
    bound = b3**2 / b1 if b1 > 0 else -np.inf
    assert dc.nu == pytest.approx(nu) and dc.nu_bound == pytest.approx(bound)


# ---------------------------------------------------------------- certificates

@pytest.fixture(scope="module")
def toy_constants(toy):
    problems, lay, _ = toy
    return [estimate_constants(p, 500, i, bounds=local_box(lay, i)) for i, p in enumerate(problems)]


def test_certificates_on_toy_run(toy, toy_run, toy_constants):
    problems, lay, _ = toy
    rep = D.check_certificates(toy_run.trace, toy_run.history, toy_constants, problems, lay, exact_slack=True)
    assert rep.k_underbar == toy_run.state.k_underbar
    assert rep.all_hold("descent")
    assert rep.all_hold("lyapunov_decrease")
    assert set(rep.summary()) == set(D.CERTIFICATES)


def test_certificates_stationary_run(toy, toy_kkt, toy_constants):
    problems, lay, _ = toy
    history = [toy_kkt] * 5
    rep = D.check_certificates(None, history, toy_constants, problems, lay, k_underbar=0, exact_slack=True)
    for name in ("descent", "subgradient", "multiplier_drift", "lyapunov_decrease", "lyapunov_subgradient"):
        rows = rep.of(name)
        assert rows and all(r.holds for r in rows), name
        assert all(r.rhs == pytest.approx(r.lhs, abs=1e-8) for r in rows), name
        if name != "descent" and name != "lyapunov_decrease":
            assert all(abs(r.rhs) == 0.0 for r in rows)


def test_undersized_lipschitz_fails_subgradient_bound(toy, toy_run, toy_constants):
    problems, lay, _ = toy
    rep = D.check_certificates(toy_run.trace, toy_run.history, toy_constants, problems, lay,
                               exact_slack=True, L_g_override=0.0)
    assert not rep.all_hold("subgradient")


def test_certificates_need_history(toy, toy_run, toy_constants):
    problems, lay, _ = toy
    with pytest.raises(InsufficientHistory):
        D.check_certificates(toy_run.trace, toy_run.history[:-1], toy_constants, problems, lay)
    with pytest.raises(InsufficientHistory):
        D.check_certificates(None, toy_run.history[:2], toy_constants, problems, lay, k_underbar=0)


# ---------------------------------------------------------------- rate fitting

def test_fit_geometric():
    r = D.fit_rate(0.5 ** np.arange(40), 0.0)
    assert isinstance(r, D.Linear) and r.q == pytest.approx(0.5, abs=0.01)
    r = D.fit_rate(3.0 + 0.9 ** np.arange(200), 3.0)
    assert isinstance(r, D.Linear) and r.q == pytest.approx(0.9, rel=0.01)


def test_fit_power_law():
    k = np.arange(1, 60, dtype=float)
    r = D.fit_rate(1.0 / k**2, 0.0)
    assert isinstance(r, D.Sublinear) and r.exponent == pytest.approx(-2.0, abs=0.05)
    r = D.fit_rate(1.0 / np.arange(1, 400, dtype=float), 0.0)
    assert isinstance(r, D.Sublinear) and r.exponent == pytest.approx(-1.0, abs=0.05)


def test_fit_oscillating_geometric_uses_envelope():
    k = np.arange(120)
    seq = 0.8**k * (1.0 + 0.5 * np.cos(2.0 * k))
    r = D.fit_rate(seq, 0.0)
    assert isinstance(r, D.Linear) and r.q == pytest.approx(0.8, rel=0.01)


def test_fit_finite_termination():
    seq = np.concatenate([0.5 ** np.arange(10), np.zeros(10)])
    assert D.fit_rate(seq, 0.0) == D.FiniteTermination(10)


def test_fit_errors():
    with pytest.raises(InsufficientHistory):
        D.fit_rate(np.ones(5), 0.0)
    with pytest.raises(NonMonotoneTail):
        D.fit_rate(np.linspace(1, 10, 30), 0.0)


def test_fit_toy_run_is_linear(toy, toy_run):
    problems, lay, _ = toy
    k0 = toy_run.state.k_underbar
    r = D.fit_rate(toy_run.trace, tail_start=k0)
    assert isinstance(r, D.Linear) and 0.0 < r.q < 1.0
    # with the limit taken from a longer run of the same deterministic sequence
    longer = solver.run(problems, lay, solver.SolverConfig(eps_stop=1e-9, max_iters=20000), keep_history=False)
    ref = D.fit_rate(toy_run.trace, longer.trace[-1].lyapunov_value, tail_start=k0)
    assert isinstance(ref, D.Linear) and ref.q == pytest.approx(r.q, abs=0.01)
