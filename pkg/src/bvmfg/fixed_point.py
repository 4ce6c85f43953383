"""Picard iteration of flow -> policy -> flow to the MFG fixed point."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .forward import simulate_mckean_vlasov, solve_fokker_planck
from .hjb import BangBangPolicy, ValueField, extract_policy, solve_hjb
from .measures import Measure, MeasureFlow, flow_distance
from .model import Grid, ModelSpec

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, msg, report: "ContractionReport"):
        super().__init__(msg)
        self.report = report


@dataclass
class ContractionReport:
    distances: list[float] = field(default_factory=list)
    wall_times: list[float] = field(default_factory=list)

    @property
    def ratios(self) -> list[float]:
        d = self.distances
        return [d[k + 1] / d[k] if d[k] > 0 else math.nan for k in range(len(d) - 1)]

    @property
    def estimated_contraction(self) -> float:
        """Geometric mean of the last (up to) five finite, positive ratios."""
        r = [v for v in self.ratios[-5:] if np.isfinite(v) and v > 0]
        if not r:
            return 0.0
        return float(np.exp(np.mean(np.log(r))))

    @property
    def spikes(self) -> list[int]:
        return [k for k, v in enumerate(self.ratios) if np.isfinite(v) and v > 1]


@dataclass
class MfgSolution:
    policy: BangBangPolicy
    flow: MeasureFlow
    value: ValueField
    iterations: int
    converged: bool
    consistency: float = math.nan  # sup_t D1(flow, Gamma(flow))
    mu0: Measure | None = None


def best_response(spec: ModelSpec, flow: MeasureFlow, grid: Grid) -> tuple[ValueField, BangBangPolicy]:
    value = solve_hjb(spec, flow, grid)
    return value, extract_policy(value, spec)


def population_flow(spec: ModelSpec, policy: BangBangPolicy, mu0: Measure, grid: Grid,
                    method: str = "grid", n_particles: int = 100_000, seed: int = 0,
                    threads: int = 1) -> MeasureFlow:
    if method == "grid":
        return solve_fokker_planck(spec, policy, mu0, grid)
    if method == "particles":
        return simulate_mckean_vlasov(spec, policy, mu0, n_particles, seed, grid=grid,
                                      threads=threads).flow
    raise ValueError(f"unknown forward method {method!r}")


def iterate_map(spec, flow, mu0, grid, **kw) -> tuple[MeasureFlow, ValueField, BangBangPolicy]:
    value, policy = best_response(spec, flow, grid)
    return population_flow(spec, policy, mu0, grid, **kw), value, policy


def solve_mfg(spec: ModelSpec, mu0: Measure, grid: Grid, tol: float = 1e-3, max_iter: int = 50,
              damping: float = 1.0, method: str = "grid", n_particles: int = 100_000,
              seed: int = 0, callback=None, threads: int = 1) -> tuple[MfgSolution, ContractionReport]:
    """Damped Picard iteration started from the frozen flow ``mu_t = mu0``.

    ``delta_k = sup_t D1(mu^k_t, mu^{k+1}_t)``; stops once ``delta_k <= tol``.
    Raises :class:`DivergenceError` when ``delta_k > 10 delta_0`` three times
    in a row.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    kw = dict(method=method, n_particles=n_particles, seed=seed, threads=threads)
    report = ContractionReport()
    flow = MeasureFlow.constant(mu0, grid)
    converged = False
    blowups = 0
    k = 0
    for k in range(max_iter):
        t0 = time.perf_counter()
        new, value, policy = iterate_map(spec, flow, mu0, grid, **kw)
        nxt = flow.blend(new, damping) if damping < 1 else new
        delta = float(flow_distance(flow, nxt).max())
        report.distances.append(delta)
        report.wall_times.append(time.perf_counter() - t0)
        log.info("iteration %d: delta=%.3e", k, delta)
        if callback is not None:
            callback(k, delta)
        flow = nxt
        if delta <= tol:
            converged = True
            break
        if k > 0 and delta > 10 * report.distances[0]:
            blowups += 1
            if blowups >= 3:
                raise DivergenceError(f"iteration diverged at k={k} (delta={delta:.3e})", report)
        else:
            blowups = 0
    # mutual consistency on the returned flow
    check, value, policy = iterate_map(spec, flow, mu0, grid, **kw)
    consistency = float(flow_distance(flow, check).max())
    sol = MfgSolution(policy, flow, value, k + 1, converged, consistency, mu0)
    return sol, report


def contraction_probe(spec: ModelSpec, grid: Grid, flow_a: MeasureFlow, flow_b: MeasureFlow,
                      mu0: Measure | None = None, **kw) -> float:
    """Empirical one-step Lipschitz constant of the iteration map between two flows."""
    den = float(flow_distance(flow_a, flow_b).max())
    if den < 1e-12:
        raise ValueError("flows are identical; ratio undefined")
    mu0 = mu0 if mu0 is not None else flow_a[0]
    out_a = iterate_map(spec, flow_a, mu0, grid, **kw)[0]
    out_b = iterate_map(spec, flow_b, mu0, grid, **kw)[0]
    return float(flow_distance(out_a, out_b).max()) / den
