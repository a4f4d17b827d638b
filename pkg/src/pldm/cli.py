"""
Experiment runner.

``pldm run`` builds an instance, runs the solver and writes the trace, the
certificate margins, the solution and a summary into an output directory.
Settings come from a config file of ``key = value`` lines with dotted keys
(``solver.rho0 = 2``) and may be overridden by flags.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from . import al, diagnostics, instances, solver
from .errors import ConfigError, ParseError, PLDMError, ValidationError
from .problem import estimate_constants, local_box

__all__ = ["RunConfig", "load_config", "parse_config", "dump_config", "main", "TRACE_COLUMNS"]

TRACE_COLUMNS = (
    "iter", "residual", "al_value", "lyapunov", "grad_x", "grad_z", "grad_gamma", "grad_u",
    "rho", "beta", "sum_h", "in_region", "step_min", "step_max",
)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _choice(*options):
    def parse(text):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


def _beta(text: str):
    t = text.strip()
    return t if t == "from_nu" else float(t)


# dotted key -> (attribute, parser, default, help)
SCHEMA: Dict[str, Tuple[str, Callable[[str], Any], Any, str]] = {
    "instance": ("instance", _choice("toy", "hvac", "random"), "toy", "problem to build"),
    "seed": ("seed", int, 0, "seed for random starts and constant sampling"),
    "toy.slack_penalty": ("toy_slack_penalty", float, instances.TOY_SLACK_PENALTY, "slack weight M"),
    "hvac.zones": ("hvac_zones", int, 3, "number of zones"),
    "hvac.horizon": ("hvac_horizon", int, 8, "prediction horizon H"),
    "hvac.seed": ("hvac_seed", int, 0, "seed of the generated building"),
    "hvac.slack_penalty": ("hvac_slack_penalty", float, 1000.0, "slack weight M"),
    "random.agents": ("random_agents", int, 4, "number of agents"),
    "random.dims": ("random_dims", int, 2, "own-block length per agent"),
    "random.density": ("random_density", float, 0.5, "extra-edge probability in (0, 1]"),
    "random.seed": ("random_seed", int, 0, "seed of the generated instance"),
    "random.slack_penalty": ("random_slack_penalty", float, 100.0, "slack weight M"),
    "solver.rho0": ("rho0", float, 1.0, "initial penalty"),
    "solver.delta": ("delta_penalty", float, 1.0, "penalty increment"),
    "solver.eta": ("eta", float, 0.5, "sub-feasible region threshold"),
    "solver.eps": ("eps_stop", float, 1e-4, "residual stopping tolerance"),
    "solver.max_iters": ("max_iters", int, 2000, "iteration cap"),
    "solver.step": ("step", _choice("linesearch", "theoretical"), "linesearch", "step-size policy"),
    "solver.c0": ("c0", float, 1.0, "initial proximal coefficient"),
    "solver.backtrack_divisor": ("backtrack_divisor", float, 0.5, "linesearch divisor in (0, 1)"),
    "solver.alpha": ("alpha", float, 0.1, "linesearch decrease weight"),
    "solver.max_retries": ("max_retries", int, 60, "linesearch retry cap"),
    "solver.carry": ("carry", _choice("relax", "keep", "reset"), "relax", "where each linesearch starts"),
    "solver.nu": ("nu", float, 1e6, "rate-condition ratio for the theoretical policy"),
    "solver.beta": ("beta", _beta, 0.025, "Lyapunov weight, or from_nu"),
    "solver.slack": ("slack_treatment", _choice("exact", "linearized"), "exact", "slack term handling"),
    "solver.init": ("init", _choice("midpoint", "random"), "midpoint", "starting point"),
    "output.dir": ("out", str, "pldm-out", "output directory"),
    "output.format": ("format", _choice("csv", "json"), "csv", "trace and certificate format"),
    "baseline.multistart": ("baseline", int, 0, "centralized baseline starts (0 = off)"),
    "certificates.enabled": ("certificates", _bool, False, "evaluate the certificates"),
    "certificates.samples": ("certificate_samples", int, 200, "samples per agent for the constants"),
    "report.classify_eps": ("classify_eps", float, 1e-2, "tolerance of the final classification"),
}

_ATTR_TO_KEY = {attr: key for key, (attr, *_rest) in SCHEMA.items()}


@dataclass(frozen=True)
class RunConfig:
    instance: str = "toy"
    seed: int = 0
    toy_slack_penalty: float = instances.TOY_SLACK_PENALTY
    hvac_zones: int = 3
    hvac_horizon: int = 8
    hvac_seed: int = 0
    hvac_slack_penalty: float = 1000.0
    random_agents: int = 4
    random_dims: int = 2
    random_density: float = 0.5
    random_seed: int = 0
    random_slack_penalty: float = 100.0
    rho0: float = 1.0
    delta_penalty: float = 1.0
    eta: float = 0.5
    eps_stop: float = 1e-4
    max_iters: int = 2000
    step: str = "linesearch"
    c0: float = 1.0
    backtrack_divisor: float = 0.5
    alpha: float = 0.1
    max_retries: int = 60
    carry: str = "relax"
    nu: float = 1e6
    beta: Any = 0.025
    slack_treatment: str = "exact"
    init: str = "midpoint"
    out: str = "pldm-out"
    format: str = "csv"
    baseline: int = 0
    certificates: bool = False
    certificate_samples: int = 200
    classify_eps: float = 1e-2

    def validate(self) -> "RunConfig":
        try:
            self.solver_config()
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        checks = [
            (self.hvac_zones >= 1, "hvac.zones must be at least 1"),
            (self.hvac_horizon >= 1, "hvac.horizon must be at least 1"),
            (self.random_agents >= 1, "random.agents must be at least 1"),
            (self.random_dims >= 1, "random.dims must be at least 1"),
            (0 < self.random_density <= 1, "random.density must lie in (0, 1]"),
            (self.baseline >= 0, "baseline.multistart must be nonnegative"),
            (self.certificate_samples >= 2, "certificates.samples must be at least 2"),
            (self.classify_eps > 0, "report.classify_eps must be positive"),
        ]
        for slack in (self.toy_slack_penalty, self.hvac_slack_penalty, self.random_slack_penalty):
            checks.append((slack > 0, "slack_penalty must be positive"))
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)
        return self

    def solver_config(self) -> solver.SolverConfig:
        search = solver.Linesearch(
            c0=self.c0, backtrack_divisor=self.backtrack_divisor, alpha=self.alpha,
            max_retries=self.max_retries, carry=self.carry,
        )
        if self.step == "theoretical":
            step = solver.Theoretical(nu=self.nu, fallback=search, sample_count=self.certificate_samples)
        else:
            step = search
        beta = solver.BetaFromNu() if self.beta == "from_nu" else solver.FixedBeta(float(self.beta))
        return solver.SolverConfig(
            rho0=self.rho0, delta_penalty=self.delta_penalty, eta=self.eta, eps_stop=self.eps_stop,
            max_iters=self.max_iters, step_policy=step, beta_policy=beta, seed=self.seed,
            slack_treatment=self.slack_treatment,
        )


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ParseError(f"unknown key {key!r}", lineno)
        attr, parse, _, _ = SCHEMA[key]
        try:
            values[attr] = parse(value)
        except ValueError as exc:
            raise ParseError(f"bad value for {key}: {exc}", lineno) from None
    return replace(base or RunConfig(), **values).validate()


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path!r}: {exc.strerror or exc}") from None
    return parse_config(text)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(config: RunConfig) -> str:
    """Serialize ``config`` so that :func:`parse_config` reproduces it."""
    return "".join(f"{_ATTR_TO_KEY[f.name]} = {_format_value(getattr(config, f.name))}\n" for f in fields(config))


# ----------------------------------------------------------------------------
# running


def build_instance(config: RunConfig):
    if config.instance == "toy":
        problems, layout, _ = instances.build_toy(config.toy_slack_penalty)
    elif config.instance == "hvac":
        params = instances.HvacParams.generate(config.hvac_zones, config.hvac_horizon, config.hvac_seed)
        problems, layout = instances.build_hvac(params, slack_penalty=config.hvac_slack_penalty)
    else:
        problems, layout, _ = instances.build_random(
            config.random_agents, config.random_dims, config.random_density, config.random_seed,
            slack_penalty=config.random_slack_penalty,
        )
    return problems, layout


def _num(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _trace_records(trace):
    for t in trace:
        yield {
            "iter": t.iter, "residual": t.residual, "al_value": t.al_value, "lyapunov": t.lyapunov_value,
            "grad_x": t.grad_x, "grad_z": t.grad_z, "grad_gamma": t.grad_gamma, "grad_u": t.grad_u,
            "rho": t.rho, "beta": t.beta, "sum_h": t.sum_h, "in_region": t.in_region,
            "step_min": t.step_min, "step_max": t.step_max,
        }


def _write_table(path_base: str, fmt: str, columns, records):
    records = list(records)
    if fmt == "csv":
        with open(path_base + ".csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(columns)
            for r in records:
                w.writerow(["" if r[c] is None else (r[c] if isinstance(r[c], str) else _num(r[c])) for c in columns])
    else:
        with open(path_base + ".json", "w", encoding="utf-8") as fh:
            json.dump([{c: _jsonable(r[c]) for c in columns} for r in records], fh, indent=1)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if np.isfinite(v) else str(v)
    return v


def _rate_text(result) -> str:
    if isinstance(result, diagnostics.Linear):
        return f"Linear(q={result.q:.17g})"
    if isinstance(result, diagnostics.Sublinear):
        return f"Sublinear(exponent={result.exponent:.17g})"
    if isinstance(result, diagnostics.FiniteTermination):
        return f"FiniteTermination(iteration={result.iteration})"
    return str(result)


def execute(config: RunConfig, log=print) -> dict:
    """Run one configured experiment and write its outputs; returns the summary."""
    scfg = config.solver_config()
    problems, layout = build_instance(config)
    os.makedirs(config.out, exist_ok=True)
    init = solver.initial_state(problems, layout, scfg, random=config.init == "random", seed=config.seed)
    t0 = time.perf_counter()
    result = solver.run(problems, layout, scfg, init, keep_history=config.certificates)
    runtime = time.perf_counter() - t0
    state, trace = result.state, result.trace

    _write_table(os.path.join(config.out, "trace"), config.format, TRACE_COLUMNS, _trace_records(trace))

    cert_summary = None
    if config.certificates:
        consts = [
            estimate_constants(p, config.certificate_samples, config.seed + i, bounds=local_box(layout, i))
            for i, p in enumerate(problems)
        ]
        cols = ("iter", "certificate", "agent", "lhs", "rhs", "margin", "holds")
        try:
            report = diagnostics.check_certificates(
                trace, result.history, consts, problems, layout,
                exact_slack=scfg.slack_treatment == "exact",
            )
            rows = [
                {"iter": r.iter, "certificate": r.name, "agent": r.agent, "lhs": r.lhs, "rhs": r.rhs,
                 "margin": r.margin, "holds": r.holds}
                for r in report.rows
            ]
            cert_summary = report.summary()
        except PLDMError as exc:
            rows = []
            cert_summary = {"skipped": str(exc)}
        _write_table(os.path.join(config.out, "certificates"), config.format, cols, rows)

    classification = al.classify_solution(state, problems, layout, config.classify_eps)
    # relaxed objective at the final primal point: duals and penalty switched off
    zero_lam = [np.zeros_like(v) for v in state.lam]
    zero_mu = [np.zeros_like(v) for v in state.mu]
    relaxed = al.augmented_lagrangian(problems, layout, state.x_bar, state.z, zero_lam, zero_mu, 0.0)
    consensus = al.plain_objective(problems, layout, state.z)
    solution = {
        "instance": config.instance,
        "x_bar": [v for v in state.x_bar],
        "z": state.z,
        "lambda": [v for v in state.lam],
        "mu": [v for v in state.mu],
        "rho": state.rho,
        "classification": classification.value,
        "objective": relaxed,
        "objective_consensus": consensus,
    }
    if config.baseline > 0:
        try:
            zb, ob = instances.centralized_baseline(problems, layout, config.baseline, config.seed)
            solution["baseline"] = {"x": zb, "objective": ob, "ratio": consensus / ob if ob else None}
        except PLDMError as exc:
            solution["baseline"] = {"error": str(exc)}

    rate = None
    if len(trace) >= 10:
        try:
            rate = _rate_text(diagnostics.fit_rate(trace, tail_start=state.k_underbar or 0))
        except PLDMError as exc:
            rate = f"unavailable: {exc}"
    summary = {
        "iterations": len(trace),
        "k_underbar": state.k_underbar,
        "first_entry": result.first_entry,
        "final_residual": trace[-1].residual if trace else al.residual(state, problems, layout),
        "converged": bool(trace and trace[-1].residual <= config.eps_stop),
        "classification": classification.value,
        "rate": rate,
        "certificates": cert_summary,
        "events": result.events,
        "runtime_s": runtime,
    }
    with open(os.path.join(config.out, "solution.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(solution), fh, indent=1)
    with open(os.path.join(config.out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(_jsonable(summary), fh, indent=1)
    log(
        f"{config.instance}: {summary['iterations']} iterations, residual {summary['final_residual']:.3e}, "
        f"{classification.value}, output in {config.out}"
    )
    return summary


def _parser() -> argparse.ArgumentParser:
    defaults = "\n".join(f"  {k} = {_format_value(v[2])}    {v[3]}" for k, v in SCHEMA.items())
    p = argparse.ArgumentParser(
        prog="pldm",
        description="Decentralized proximal-linearization solver: experiment runner.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="config keys and defaults:\n" + defaults,
    )
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment", formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config keys and defaults:\n" + defaults)
    r.add_argument("--config", help="config file of 'key = value' lines")
    r.add_argument("--instance", choices=("toy", "hvac", "random"))
    r.add_argument("--eps", type=float, help="residual stopping tolerance")
    r.add_argument("--max-iters", type=int, dest="max_iters")
    r.add_argument("--rho0", type=float)
    r.add_argument("--delta", type=float, help="penalty increment")
    r.add_argument("--eta", type=float, help="sub-feasible region threshold")
    r.add_argument("--seed", type=int)
    r.add_argument("--baseline", type=int, metavar="MULTISTARTS", help="run the centralized baseline")
    r.add_argument("--certificates", action="store_true", default=None, help="evaluate certificates")
    r.add_argument("--out", help="output directory")
    r.add_argument("--format", choices=("csv", "json"))
    sub.add_parser("defaults", help="print the default config")
    return p


_FLAG_TO_ATTR = {
    "instance": "instance", "eps": "eps_stop", "max_iters": "max_iters", "rho0": "rho0",
    "delta": "delta_penalty", "eta": "eta", "seed": "seed", "baseline": "baseline",
    "certificates": "certificates", "out": "out", "format": "format",
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "defaults":
        sys.stdout.write(dump_config(RunConfig()))
        return 0
    try:
        config = load_config(args.config) if args.config else RunConfig()
        overrides = {attr: getattr(args, flag) for flag, attr in _FLAG_TO_ATTR.items() if getattr(args, flag) is not None}
        config = replace(config, **overrides).validate()
    except ConfigError as exc:
        print(f"pldm: config error: {exc}", file=sys.stderr)
        return 2
    try:
        execute(config)
    except (PLDMError, FloatingPointError, ZeroDivisionError, ValueError) as exc:
        print(f"pldm: solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"pldm: cannot write output: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
