"""Command-line entry point.

    bvmfg solve-mfg         --config model.cfg --tol 1e-4 --out run1/
    bvmfg simulate-nplayer  --config model.cfg --N 64 --reps 64
    bvmfg nash-gap          --config model.cfg --N 8,16,32,64 --reps 64 --seed 7
    bvmfg systemic          --config model.cfg [--rho 0.5]
    bvmfg verify            --suite coefficients|special|hamiltonian|all

Configs are INI files: a ``[model]`` section (``family`` plus its
parameters) and optional ``[grid]`` (nx, nt) and ``[initial]`` (mean, var)
sections.  Without ``--config`` the systemic-risk fixture is used.  Outputs
go to ``--out`` or to ``$BVMFG_OUT/<command>`` (default ``./bvmfg-runs``),
with a ``manifest.json`` listing every file.

Exit codes: 0 success, 1 numerical abort, 2 configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .fixed_point import DivergenceError, solve_mfg
from .forward import boundary_mass
from .hjb import brute_force_hamiltonian, hamiltonian
from .measures import Measure, fmt, write_field_csv, write_flow_csv
from .model import SYSTEMIC_FIXTURE, ModelError, build_model, make_grid
from .nplayer import coupling_gap, deviator_gap, nash_gap, perturbed_policies, scaling_fit, simulate_nplayer
from .special import parabolic_cylinder
from .systemic import (SystemicRiskParams, coefficient_identities, coefficient_ode_residuals, coefficients,
                       common_noise_reduction, solve_systemic_hjb, value_asymmetry, verify_fixed_point_mean)

log = logging.getLogger("bvmfg")

OUT_ENV = "BVMFG_OUT"
DEFAULT_NX = 121
DEFAULT_VAR = 0.25
EDGE_NODES = 5
EDGE_MASS = 1e-3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------- config


def load_config(path: str | None) -> dict[str, dict[str, str]]:
    cfg = {"model": {k: str(v) for k, v in SYSTEMIC_FIXTURE.items()}}
    cfg["model"]["family"] = "systemic_risk"
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (T vs t)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not parser.has_section("model"):
        raise ConfigError("config needs a [model] section")
    out = {s: dict(parser.items(s)) for s in parser.sections()}
    base = Path(path).resolve().parent
    for key in ("b0_table", "f0_table"):
        if key in out["model"]:
            out["model"][key] = str(base / out["model"][key])
    return out


def _model_cfg(cfg) -> dict:
    m = {}
    for k, v in cfg["model"].items():
        if k in ("family", "b0_table", "f0_table"):
            m[k] = v
            continue
        try:
            m[k] = float(v)
        except ValueError:
            raise ConfigError(f"[model] {k} = {v!r} is not a number") from None
    return m


def _section_float(cfg, section, key, default):
    raw = cfg.get(section, {}).get(key)
    if raw is None:
        return default
    try:
        return type(default)(float(raw)) if isinstance(default, int) else float(raw)
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a number") from None


def _setup(cfg, nx_flag=None):
    spec = build_model(_model_cfg(cfg))
    nx = nx_flag or _section_float(cfg, "grid", "nx", DEFAULT_NX)
    nt = cfg.get("grid", {}).get("nt")
    grid = make_grid(spec, int(nx), int(float(nt)) if nt else None)
    centre = 0.5 * (spec.x_lo + spec.x_hi)
    mean = _section_float(cfg, "initial", "mean", float(spec.params.get("m", centre)))
    var = _section_float(cfg, "initial", "var", DEFAULT_VAR)
    if var <= 0:
        raise ConfigError("[initial] var must be > 0")
    return spec, grid, Measure.gaussian(grid, mean, var)


# ---------------------------------------------------------------- output


class Output:
    def __init__(self, directory: Path, command: str, args: argparse.Namespace, cfg):
        self.dir = directory
        self.files: list[str] = []
        self.timings: dict[str, float] = {}
        self.manifest = {
            "command": command,
            "config": getattr(args, "config", None),
            "parameters": cfg,
            "flags": {k: v for k, v in vars(args).items() if k not in ("func", "command")},
            "seed": getattr(args, "seed", None),
            "output_dir": str(directory),
            "version": __version__,
        }
        try:
            directory.mkdir(parents=True, exist_ok=True)
            probe = directory / ".write-test"
            probe.write_text("")
            probe.unlink()
        except OSError as exc:
            raise ConfigError(f"output directory {directory} is not writable: {exc}") from None

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.dir / name

    def rows(self, name: str, header, rows) -> None:
        with open(self.path(name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])

    def json(self, name: str, obj) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def close(self, status: str) -> None:
        self.manifest.update(files=sorted(self.files + ["manifest.json"]), timings=self.timings,
                             status=status)
        with open(self.dir / "manifest.json", "w") as fh:
            json.dump(_jsonable(self.manifest), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _outdir(args, command) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "bvmfg-runs")) / command


def _timed(out: Output, key: str, fn, *a, **kw):
    t0 = time.perf_counter()
    res = fn(*a, **kw)
    out.timings[key] = time.perf_counter() - t0
    return res


# ---------------------------------------------------------------- commands


def _write_solution(out: Output, sol, report):
    g = sol.value.grid
    write_field_csv(out.path("value.csv"), sol.value.values, g)
    write_flow_csv(out.path("flow.csv"), sol.flow)
    write_field_csv(out.path("policy.csv"), sol.policy.action, g)
    out.rows("boundaries.csv", ["t", "lower", "upper"],
             zip(map(float, g.t), map(float, sol.policy.lower_boundary), map(float, sol.policy.upper_boundary)))
    ratios = [math.nan] + report.ratios
    out.rows("iterations.csv", ["k", "delta", "ratio"],
             [(k, float(d), float(r)) for k, (d, r) in enumerate(zip(report.distances, ratios))])


def _check_edges(flow) -> float:
    """Warn when the flow piles mass against the truncation walls."""
    mass = boundary_mass(flow, EDGE_NODES)
    if mass > EDGE_MASS:
        log.warning("flow puts mass %.3g within %d nodes of a wall; widen [x_lo, x_hi]", mass, EDGE_NODES)
    return mass


def cmd_solve_mfg(args, out: Output, cfg) -> int:
    spec, grid, mu0 = _setup(cfg, args.nx)
    try:
        sol, report = _timed(out, "solve_mfg", solve_mfg, spec, mu0, grid, tol=args.tol,
                             max_iter=args.max_iter, damping=args.damping, method=args.method,
                             n_particles=args.particles, seed=args.seed, threads=args.threads)
    except DivergenceError as exc:
        out.rows("iterations.csv", ["k", "delta"], enumerate(map(float, exc.report.distances)))
        out.json("summary.json", {"converged": False, "error": str(exc)})
        out.timings["iterations"] = exc.report.wall_times
        log.error("%s", exc)
        return 1
    out.timings["iterations"] = report.wall_times
    _write_solution(out, sol, report)
    means = sol.flow.means()
    out.json("summary.json", {
        "converged": sol.converged, "iterations": sol.iterations, "consistency": sol.consistency,
        "final_delta": report.distances[-1], "estimated_contraction": report.estimated_contraction,
        "policy_rational": sol.policy.rational, "nx": grid.nx, "nt": grid.nt,
        "max_mean_drift": float(np.max(np.abs(means - means[0]))),
        "edge_mass": _check_edges(sol.flow),
    })
    return 0 if sol.converged else 1


def _mfg_for_game(args, out, cfg):
    spec, grid, mu0 = _setup(cfg, args.nx)
    sol, _ = _timed(out, "solve_mfg", solve_mfg, spec, mu0, grid, threads=args.threads)
    if not sol.converged:
        raise DivergenceError("MFG iteration did not converge", None)
    _check_edges(sol.flow)
    return spec, grid, mu0, sol


def cmd_simulate_nplayer(args, out: Output, cfg) -> int:
    spec, grid, mu0, sol = _mfg_for_game(args, out, cfg)
    x0 = mu0 if args.x0 is None else args.x0
    run = _timed(out, "simulate", simulate_nplayer, spec, sol.policy, args.N, args.reps, args.seed,
                 x0=x0, threads=args.threads)
    out.rows("nplayer.csv", ["player", "mean_cost", "std_error"],
             [(i, float(m), float(s)) for i, (m, s) in enumerate(zip(run.mean_cost, run.std_error))])
    mean, se = run.pooled_cost
    out.json("summary.json", {"N": args.N, "reps": args.reps, "pooled_cost": mean, "pooled_se": se})
    return 0


def _parse_ns(text: str) -> list[int]:
    try:
        ns = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--N expects a comma-separated list of integers, got {text!r}") from None
    if not ns or min(ns) < 2:
        raise ConfigError("--N values must be >= 2")
    return ns


def _fit(ns, vals):
    try:
        f = scaling_fit(ns, vals)
        return {"slope": f.slope, "intercept": f.intercept, "r2": f.r2, "degenerate": f.degenerate}
    except ValueError as exc:
        return {"error": str(exc)}


def cmd_nash_gap(args, out: Output, cfg) -> int:
    spec, grid, mu0, sol = _mfg_for_game(args, out, cfg)
    ns = _parse_ns(args.N)
    dev = perturbed_policies(sol.policy, 1)[0][1]
    rows, eps, cg_mean, cg_p95, dg = [], [], [], [], []
    for N in ns:
        t0 = time.perf_counter()
        est = nash_gap(spec, sol, N, args.reps, args.seed, deviation_budget=args.budget,
                       threads=args.threads)
        cg = coupling_gap(spec, sol.policy, sol.flow, N, args.reps, args.seed, x0=mu0, threads=args.threads)
        lg = deviator_gap(spec, sol.policy, dev, sol.flow, N, args.reps, args.seed, x0=mu0,
                          threads=args.threads)
        out.timings[f"N={N}"] = time.perf_counter() - t0
        worst = float(lg.sup_gap.max(axis=1).mean())
        rows.append((N, est.epsilon_hat, est.std_error, cg.mean_sq, cg.p95_sq, worst, est.deviation_descriptor))
        eps.append(est.epsilon_hat)
        cg_mean.append(cg.mean_sq)
        cg_p95.append(cg.p95_sq)
        dg.append(worst)
    out.rows("nash.csv", ["N", "epsilon_hat", "std_error", "coupling_gap_mean", "coupling_gap_p95",
                          "deviator_gap", "deviation"], rows)
    out.json("summary.json", {
        "N": ns, "reps": args.reps,
        "epsilon_hat_fit": _fit(ns, eps),
        "coupling_gap_mean_fit": _fit(ns, cg_mean),
        "coupling_gap_p95_fit": _fit(ns, cg_p95),
        "deviator_gap_fit": _fit(ns, dg),
    })
    return 0


def _systemic_params(cfg, rho=None) -> SystemicRiskParams:
    m = _model_cfg(cfg)
    if m.get("family") != "systemic_risk":
        raise ConfigError("the systemic command needs family = systemic_risk")
    p = SystemicRiskParams.from_config(m)
    return p.replace(rho=rho) if rho is not None else p


def cmd_systemic(args, out: Output, cfg) -> int:
    params = _systemic_params(cfg, 0.0)
    spec, grid, mu0 = _setup(cfg, args.nx)
    cs = coefficients(params)
    s, table = cs.table(args.samples)
    out.rows("coefficients.csv", ["s", *cs.names], zip(map(float, s), *(map(float, table[k]) for k in cs.names)))
    value, fb = _timed(out, "hjb", solve_systemic_hjb, params, grid)
    write_field_csv(out.path("value.csv"), value.values, grid)
    out.rows("boundary.csv", ["s", "x1", "x2", "h"],
             zip(map(float, fb.s), map(float, fb.x1), map(float, fb.x2), map(float, fb.h)))
    mean = _timed(out, "mean_check", verify_fixed_point_mean, params, grid, args.particles, args.seed,
                  mu0=mu0, threads=args.threads)
    summary = {
        "value_asymmetry": value_asymmetry(value),
        "boundary_asymmetry": float(np.nanmax(np.abs(fb.asymmetry))) if not fb.fully_degenerate else None,
        "degenerate": fb.fully_degenerate,
        "ode_residuals": coefficient_ode_residuals(cs),
        "identities": coefficient_identities(cs),
        "mean_drift": {"max": mean.max_drift, "bound": mean.bound, "passed": mean.passed,
                       "max_balance": float(np.max(np.abs(mean.balance)))},
    }
    if args.rho:
        rep = _timed(out, "common_noise", common_noise_reduction, params.replace(rho=args.rho), grid,
                     args.particles, args.seed, mu0=mu0, threads=args.threads)
        summary["common_noise"] = {"rho": rep.rho, "slope": rep.slope, "slope_se": rep.slope_se,
                                   "expected_slope": rep.expected_slope, "max_d1": rep.max_distance,
                                   "tracking_error": rep.tracking_error,
                                   "literal_max_d1": rep.literal_max_distance}
    out.json("verification.json", summary)
    return 0


# ---------------------------------------------------------------- verify suites


def suite_coefficients() -> dict:
    cs = coefficients(SystemicRiskParams())
    ident = coefficient_identities(cs)
    odes = coefficient_ode_residuals(cs)
    term = cs.terminal_values()
    exp = cs.expected_terminal
    checks = {f"identity {k}": v <= 1e-12 for k, v in ident.items()}
    checks.update({f"ode {k}": v <= 1e-9 for k, v in odes.items()})
    checks.update({f"terminal {k}": abs(term[k] - exp[k]) <= 1e-12 for k in term})
    return checks


def suite_special() -> dict:
    xs = np.linspace(-3, 3, 61)
    ref = np.array([math.exp(x * x / 4) * math.sqrt(math.pi / 2) * math.erfc(x / math.sqrt(2)) for x in xs])
    got = parabolic_cylinder(-1.0, xs)
    checks = {"D_-1 erfc form": bool(np.max(np.abs(got - ref)) <= 1e-9)}
    for a in (-0.5, -1.5, -2.5):
        exact = math.sqrt(math.pi) * 2 ** (a / 2) / math.gamma((1 - a) / 2)
        checks[f"D_{a}(0)"] = abs(parabolic_cylinder(a, 0.0) - exact) <= 1e-9
    return checks


def suite_hamiltonian(n: int = 1000, seed: int = 0) -> dict:
    gen = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        p, b, f = gen.uniform(-3, 3, 3)
        g1, g2 = gen.uniform(0, 2, 2)
        th = gen.uniform(0, 2)
        worst = max(worst, abs(float(hamiltonian(p, b, f, g1, g2, th))
                               - brute_force_hamiltonian(p, b, f, g1, g2, th)))
    return {"three-branch minimum": worst <= 1e-9}


SUITES = {"coefficients": suite_coefficients, "special": suite_special, "hamiltonian": suite_hamiltonian}


def cmd_verify(args, out: Output, cfg) -> int:
    names = sorted(SUITES) if args.suite == "all" else [args.suite]
    results = {}
    for name in names:
        results[name] = _timed(out, name, SUITES[name])
    ok = all(all(v.values()) for v in results.values())
    for name, checks in results.items():
        for k, v in checks.items():
            print(f"{'PASS' if v else 'FAIL'}  {name}: {k}")
    out.json("verify.json", {"passed": ok, "results": results})
    return 0 if ok else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bvmfg", description="Mean field games with bounded-velocity controls")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=0):
        p.add_argument("--config", help="INI config file (default: systemic-risk fixture)")
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
        p.add_argument("--seed", type=int, default=seed, help=f"master seed (default {seed})")
        p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        p.add_argument("--nx", type=int, default=None, help=f"grid nodes (default [grid] nx or {DEFAULT_NX})")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("solve-mfg", help="solve the MFG fixed point")
    common(p)
    p.add_argument("--tol", type=float, default=1e-3, help="sup_t D1 stopping tolerance (default 1e-3)")
    p.add_argument("--max-iter", type=int, default=50, help="iteration cap (default 50)")
    p.add_argument("--damping", type=float, default=1.0, help="flow damping in (0, 1] (default 1)")
    p.add_argument("--method", choices=["grid", "particles"], default="grid",
                   help="forward solver (default grid)")
    p.add_argument("--particles", type=int, default=100_000, help="particles for --method particles")
    p.set_defaults(func=cmd_solve_mfg)

    p = sub.add_parser("simulate-nplayer", help="simulate the N-player game under the MFG policy")
    common(p)
    p.add_argument("--N", type=int, default=64, help="players (default 64)")
    p.add_argument("--reps", type=int, default=64, help="replications (default 64)")
    p.add_argument("--x0", type=float, default=None, help="common start (default: sample the initial law)")
    p.set_defaults(func=cmd_simulate_nplayer)

    p = sub.add_parser("nash-gap", help="epsilon-Nash and coupling-gap scaling in N")
    common(p, seed=7)
    p.add_argument("--N", default="8,16,32,64,128,256", help="comma-separated player counts")
    p.add_argument("--reps", type=int, default=64, help="replications (default 64)")
    p.add_argument("--budget", type=int, default=8, help="perturbed-threshold deviations (default 8)")
    p.set_defaults(func=cmd_nash_gap)

    p = sub.add_parser("systemic", help="systemic-risk example: coefficients, free boundary, checks")
    common(p)
    p.add_argument("--particles", type=int, default=100_000, help="particles (default 1e5)")
    p.add_argument("--rho", type=float, default=0.0, help="also run the common-noise check at this rho")
    p.add_argument("--samples", type=int, default=201, help="coefficient table rows (default 201)")
    p.set_defaults(func=cmd_systemic)

    p = sub.add_parser("verify", help="run a verification battery")
    p.add_argument("--suite", choices=[*sorted(SUITES), "all"], default="all")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/verify)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_verify)
    return ap


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse: usage errors exit 2, --help/--version exit 0
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = None
    try:
        cfg = load_config(getattr(args, "config", None))
        out = Output(_outdir(args, args.command), args.command, args, cfg)
        code = args.func(args, out, cfg)
    except (ConfigError, ModelError) as exc:
        print(f"bvmfg: error: {exc}", file=sys.stderr)
        if out is not None:
            out.close("config-error")
        return 2
    except DivergenceError as exc:
        print(f"bvmfg: numerical abort: {exc}", file=sys.stderr)
        if out is not None:
            out.close("diverged")
        return 1
    out.close("ok" if code == 0 else "failed")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
