import csv
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pldm import cli, instances
from pldm.errors import ConfigError, ParseError, ValidationError


def read_trace(out):
    with open(os.path.join(out, "trace.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def read_json(out, name):
    with open(os.path.join(out, name)) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def toy_out(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("toy"))
    code = cli.main(["run", "--instance", "toy", "--out", out, "--baseline", "3"])
    return code, out


def test_run_toy_exit_and_solution(toy_out):
    code, out = toy_out
    assert code == 0
    sol = read_json(out, "solution.json")
    assert sol["classification"] in ("EpsCritical", "Critical")
    assert np.allclose(sol["z"], [2.0, 1.0], atol=1e-2)
    assert sol["baseline"]["ratio"] == pytest.approx(1.0, abs=1e-2)


def test_trace_columns_and_invariants(toy_out):
    _, out = toy_out
    rows = read_trace(out)
    summary = read_json(out, "summary.json")
    assert list(rows[0]) == list(cli.TRACE_COLUMNS)
    assert len(rows) == summary["iterations"]
    assert all(float(r["residual"]) >= 0 for r in rows)
    rho = [float(r["rho"]) for r in rows]
    assert all(b >= a for a, b in zip(rho, rho[1:]))
    assert float(rows[-1]["residual"]) == summary["final_residual"]


def test_solution_objective_recomputed(toy_out):
    _, out = toy_out
    sol = read_json(out, "solution.json")
    problems, lay, _ = instances.build_toy()
    total = 0.0
    for i, p in enumerate(problems):
        xb = np.array(sol["x_bar"][i])
        n = lay.local_dim(i)
        total += p.objective(xb[:n]) + p.slack_penalty * float(xb[n:] @ xb[n:])
    assert sol["objective"] == pytest.approx(total, rel=1e-12)
    x1, x2 = sol["z"]
    assert sol["objective_consensus"] == pytest.approx(x1 + x2 + x1 * x2**2, rel=1e-12)


def test_runs_are_bitwise_deterministic(toy_out, tmp_path):
    _, out = toy_out
    cli.main(["run", "--instance", "toy", "--out", str(tmp_path)])
    with open(os.path.join(out, "trace.csv"), "rb") as a, open(tmp_path / "trace.csv", "rb") as b:
        assert a.read() == b.read()


def test_zero_iterations_not_converged(tmp_path):
    assert cli.main(["run", "--instance", "toy", "--max-iters", "0", "--out", str(tmp_path)]) == 0
    assert read_json(tmp_path, "summary.json")["classification"] == "NotConverged"
    assert read_trace(tmp_path) == []


def test_json_format_and_certificates(tmp_path):
    code = cli.main(["run", "--instance", "toy", "--format", "json", "--certificates", "--eps", "1e-3",
                     "--out", str(tmp_path)])
    assert code == 0
    trace = read_json(tmp_path, "trace.json")
    certs = read_json(tmp_path, "certificates.json")
    assert trace and set(trace[0]) == set(cli.TRACE_COLUMNS)
    assert certs and {"certificate", "lhs", "rhs", "holds"} <= set(certs[0])
    assert set(read_json(tmp_path, "summary.json")["certificates"]) >= {"descent", "lyapunov_decrease"}


def test_missing_config_exits_2(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "cannot read config" in capsys.readouterr().err


def test_invalid_value_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("instance = toy\nsolver.rho0 = -1\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert "rho0 must be positive" in capsys.readouterr().err


def test_unwritable_output_exits_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["run", "--instance", "toy", "--max-iters", "3", "--out", str(blocker)]) == 3


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ParseError) as e:
        cli.parse_config("instance = toy\n\n# note\nsolver.eps 1e-3\n")
    assert e.value.line == 4
    with pytest.raises(ParseError) as e:
        cli.parse_config("solver.unknown = 3")
    assert e.value.line == 1
    with pytest.raises(ParseError):
        cli.parse_config("solver.max_iters = many")
    with pytest.raises(ValidationError):
        cli.parse_config("random.density = 0")
    assert issubclass(ParseError, ConfigError)


def test_minimal_config_gives_defaults():
    cfg = cli.parse_config("instance = toy\n")
    assert cfg == cli.RunConfig()
    assert cfg.solver_config().eps_stop == 1e-4 and cfg.max_iters == 2000


def test_defaults_subcommand_round_trips(capsys):
    assert cli.main(["defaults"]) == 0
    assert cli.parse_config(capsys.readouterr().out) == cli.RunConfig()


_finite = st.floats(1e-6, 1e6, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(
    st.sampled_from(["toy", "hvac", "random"]), st.integers(0, 10**6), _finite, _finite,
    st.floats(1e-12, 1.0), st.integers(0, 10**5), st.sampled_from(["relax", "keep", "reset"]),
    st.one_of(st.just("from_nu"), st.floats(1e-6, 10.0)), st.booleans(), st.floats(0.01, 1.0),
)
def test_config_dump_parse_round_trip(inst, seed, rho0, delta, eps, iters, carry, beta, certs, density):
    cfg = cli.RunConfig(instance=inst, seed=seed, rho0=rho0, delta_penalty=delta, eps_stop=eps,
                        max_iters=iters, carry=carry, beta=beta, certificates=certs, random_density=density,
                        step="theoretical" if beta == "from_nu" else "linesearch")
    assert cli.parse_config(cli.dump_config(cfg)) == cfg
