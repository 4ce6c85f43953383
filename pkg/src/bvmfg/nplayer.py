"""N-player game simulation, coupling gaps and the epsilon-Nash estimate.

All players share one spec and one grid.  Player i of replication k draws
its Brownian increments from stream ``(IDIOSYNCRATIC, k)`` at counter
position i, so paired runs (same seed, different policies) see identical
noise and relabelling players only permutes the outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .fixed_point import MfgSolution
from .forward import reflect
from .hjb import BangBangPolicy, extract_policy, solve_hjb
from .measures import Measure, MeasureFlow, quantiles
from .model import CoefficientEvaluator, Grid, ModelError, ModelSpec


@dataclass
class GameRun:
    N: int
    trajectories: np.ndarray  # (nt, N) paths of the first replication
    costs: np.ndarray  # (n_rep, N) realised costs
    seed: int

    @property
    def mean_cost(self) -> np.ndarray:
        return self.costs.mean(axis=0)

    @property
    def std_error(self) -> np.ndarray:
        n = self.costs.shape[0]
        return self.costs.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full(self.N, np.nan)

    @property
    def pooled_cost(self) -> tuple[float, float]:
        """Mean cost over all players and its standard error (from replication means)."""
        per_rep = self.costs.mean(axis=1)
        n = per_rep.size
        se = per_rep.std(ddof=1) / math.sqrt(n) if n > 1 else math.nan
        return float(per_rep.mean()), float(se)


# ---------------------------------------------------------------- plumbing


def _noise(seed: int, n_rep: int, N: int, steps: int, threads: int = 1, order=None) -> np.ndarray:
    z = np.empty((n_rep, steps, N))
    for k in range(n_rep):
        s = rng.stream_id(rng.IDIOSYNCRATIC, k)
        for n in range(steps):
            z[k, n] = rng.normals(seed, s, n, N, threads=threads)
    return z if order is None else z[:, :, order]


def _initial(x0, N: int, n_rep: int, seed: int, grid: Grid, order=None) -> np.ndarray:
    if isinstance(x0, Measure):
        out = np.empty((n_rep, N))
        for k in range(n_rep):
            u = rng.uniforms(seed, rng.stream_id(rng.INITIAL, k), 0, 0, N)
            out[k] = quantiles(x0, u)
        return out if order is None else out[:, order]
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 0:
        return np.full((n_rep, N), float(x0))
    if x0.shape != (N,):
        raise ModelError(f"x0 must be a scalar, a Measure or an array of {N} positions")
    x0 = x0 if order is None else x0[order]
    return np.broadcast_to(x0, (n_rep, N)).copy()


def _stack(policies, N: int, grid: Grid):
    if isinstance(policies, BangBangPolicy):
        policies = [policies]
    policies = list(policies)
    if len(policies) not in (1, N):
        raise ModelError("give one policy or one per player")
    for p in policies:
        if p.action.shape != (grid.nt, grid.nx):
            raise ModelError("policy is defined on a different grid")
    acts = np.stack([p.action for p in policies])
    idx = np.zeros(N, dtype=np.int64) if len(policies) == 1 else np.arange(N)
    return acts, idx


class _Field:
    """Drift and running cost either from the empirical measure or from a fixed flow."""

    def __init__(self, spec: ModelSpec, grid: Grid, flow: MeasureFlow | None):
        self.spec, self.grid, self.flow = spec, grid, flow
        self.ev = None
        if flow is not None and spec.drift_of_mean is None:
            self.ev = CoefficientEvaluator(spec, grid)
        self.flow_means = flow.means() if flow is not None else None

    def __call__(self, n: int, x: np.ndarray):
        spec = self.spec
        if self.flow is None:  # empirical measure of the N players in each replication
            if spec.drift_of_mean is not None:
                m = x.mean(axis=1, keepdims=True)
                return spec.drift_of_mean(x, m), spec.cost_of_mean(x, m)
            xi, xj = x[:, :, None], x[:, None, :]
            return spec.b0(xi, xj).mean(axis=2), spec.f0(xi, xj).mean(axis=2)
        if spec.drift_of_mean is not None:
            m = self.flow_means[n]
            return spec.drift_of_mean(x, m), spec.cost_of_mean(x, m)
        dens = self.flow.densities[n]
        gx = self.grid.x
        return np.interp(x, gx, self.ev.drift(dens)), np.interp(x, gx, self.ev.cost(dens))


def _simulate(spec: ModelSpec, grid: Grid, acts, pidx, x0, z, flow=None, paths=False):
    """Euler-Maruyama for all replications at once; returns (costs, paths or None)."""
    field_ = _Field(spec, grid, flow)
    n_rep, N = x0.shape
    dt, sq = grid.dt, math.sqrt(grid.dt)
    g1 = lambda x: np.broadcast_to(spec.g1(x), x.shape)  # noqa: E731
    g2 = lambda x: np.broadcast_to(spec.g2(x), x.shape)  # noqa: E731
    x = x0.copy()
    cost = np.zeros((n_rep, N))
    out = np.empty((grid.nt, n_rep, N)) if paths else None
    cols = pidx[None, :]
    for n in range(grid.nt):
        if paths:
            out[n] = x
        node = np.clip(np.rint((x - grid.x_lo) / grid.dx), 0, grid.nx - 1).astype(np.int64)
        u = acts[cols, n, node]
        b, f = field_(n, x)
        run = f + g1(x) * np.maximum(u, 0.0) + g2(x) * np.maximum(-u, 0.0)
        w = 0.5 if n in (0, grid.nt - 1) else 1.0
        cost += w * dt * run
        if n == grid.nt - 1:
            break
        x = reflect(x + (b + u) * dt + spec.sigma * sq * z[:, n], grid.x_lo, grid.x_hi)
    cost += np.broadcast_to(spec.terminal_cost(x), x.shape)
    return cost, out


def _setup(grid, N, n_rep, seed, x0, threads, order=None):
    if N < 2:
        raise ModelError("need N >= 2 players")
    if n_rep < 1:
        raise ModelError("need n_rep >= 1")
    z = _noise(seed, n_rep, N, grid.nt - 1, threads, order)
    return _initial(x0, N, n_rep, seed, grid, order), z


# ---------------------------------------------------------------- operations


def simulate_nplayer(spec: ModelSpec, policies, N: int, n_rep: int, seed: int, x0=0.0,
                     threads: int = 1, order=None) -> GameRun:
    """Simulate the N-player game under per-player feedback policies.

    ``policies`` is one :class:`BangBangPolicy` shared by all or a list of N.
    ``x0`` is a common start, an array of N starts or a Measure sampled per
    replication.  ``order`` reassigns noise/initial draws to players (player i
    gets draw ``order[i]``).
    """
    pol0 = policies if isinstance(policies, BangBangPolicy) else list(policies)[0]
    grid = pol0.grid
    grid.check_cfl(spec)
    acts, pidx = _stack(policies, N, grid)
    xs, z = _setup(grid, N, n_rep, seed, x0, threads, order)
    costs, paths = _simulate(spec, grid, acts, pidx, xs, z, paths=True)
    return GameRun(N, paths[:, 0, :].copy(), costs, seed)


@dataclass
class CouplingGap:
    N: int
    sup_gap: np.ndarray  # (n_rep, N) sup_t |x^i - x_hat^i|
    mean_sq: float
    p95_sq: float
    worst: float  # max over players and reps


def _gap_stats(N, gap) -> CouplingGap:
    sq = gap**2
    return CouplingGap(N, gap, float(sq.mean()), float(np.percentile(sq, 95)), float(gap.max()))


def coupling_gap(spec: ModelSpec, policy: BangBangPolicy, flow: MeasureFlow | None, N: int,
                 n_rep: int, seed: int, x0=0.0, threads: int = 1) -> CouplingGap:
    """Distance between the N-player paths and their mean-field counterparts under shared noise."""
    if flow is None:
        raise ModelError("the mean-field flow is required (solve the MFG first)")
    grid = policy.grid
    acts, pidx = _stack(policy, N, grid)
    xs, z = _setup(grid, N, n_rep, seed, x0, threads)
    _, game = _simulate(spec, grid, acts, pidx, xs, z, paths=True)
    _, limit = _simulate(spec, grid, acts, pidx, xs, z, flow=flow, paths=True)
    return _gap_stats(N, np.abs(game - limit).max(axis=0))


def deviator_gap(spec: ModelSpec, policy: BangBangPolicy, deviation: BangBangPolicy,
                 flow: MeasureFlow, N: int, n_rep: int, seed: int, x0=0.0, deviator: int = 0,
                 threads: int = 1) -> CouplingGap:
    """Gap between the non-deviating players and their mean-field counterparts.

    One player switches to ``deviation``; the others keep ``policy``.  The
    statistic is ``sup_t |x_hat^i - x~^i|`` over players ``i != deviator``.
    """
    grid = policy.grid
    acts = np.stack([policy.action, deviation.action])
    pidx = np.zeros(N, dtype=np.int64)
    pidx[deviator] = 1
    xs, z = _setup(grid, N, n_rep, seed, x0, threads)
    _, game = _simulate(spec, grid, acts, pidx, xs, z, paths=True)
    _, limit = _simulate(spec, grid, acts[:1], np.zeros(N, dtype=np.int64), xs, z, flow=flow,
                         paths=True)
    gap = np.abs(game - limit).max(axis=0)
    return _gap_stats(N, np.delete(gap, deviator, axis=1))


def finite_player_spec(spec: ModelSpec, N: int) -> ModelSpec:
    """The model one player faces when the other N-1 follow the flow.

    The empirical measure gives weight 1/N to the player's own state, so
    ``b(x, mu)`` becomes ``b0(x, x)/N + (1 - 1/N) int b0(x, y) mu(dy)`` (and
    likewise for the running cost).
    """
    w = 1.0 / N
    if spec.drift_of_mean is not None:
        bm, fm = spec.drift_of_mean, spec.cost_of_mean
        return spec.replace(drift_of_mean=lambda x, m: bm(x, w * x + (1 - w) * m),
                            cost_of_mean=lambda x, m: fm(x, w * x + (1 - w) * m))
    b0, f0 = spec.b0, spec.f0
    return spec.replace(b0=lambda x, y: (1 - w) * b0(x, y) + w * b0(x, x),
                        f0=lambda x, y: (1 - w) * f0(x, y) + w * f0(x, x))


def perturbed_policies(policy: BangBangPolicy, budget: int, step: float | None = None):
    """Threshold perturbations of a bang-bang policy.

    Cycles through widening, narrowing, shifting up and shifting down the
    inaction band by multiples of ``step`` (default one grid spacing).
    """
    grid = policy.grid
    step = grid.dx if step is None else float(step)
    lo, hi = policy.lower_boundary, policy.upper_boundary
    shapes = [(-1, 1, "widen"), (1, -1, "narrow"), (1, 1, "shift-up"), (-1, -1, "shift-down")]
    out = []
    for k in range(budget):
        sl, sh, name = shapes[k % 4]
        d = (k // 4 + 1) * step
        new_lo, new_hi = lo + sl * d, hi + sh * d
        # keep the band well ordered where both boundaries exist
        both = np.isfinite(new_lo) & np.isfinite(new_hi)
        mid = 0.5 * (new_lo + new_hi)
        new_lo = np.where(both & (new_lo > new_hi), mid, new_lo)
        new_hi = np.where(both & (new_lo > new_hi), mid, new_hi)
        out.append((f"{name}:{d:g}", BangBangPolicy.from_thresholds(grid, policy.theta, new_lo, new_hi)))
    return out


@dataclass
class NashGapEstimate:
    epsilon_hat: float
    std_error: float
    N: int
    deviation_descriptor: str
    gains: dict[str, tuple[float, float]] = field(default_factory=dict)  # name -> (mean, se)


def nash_gap(spec: ModelSpec, solution: MfgSolution, N: int, n_rep: int, seed: int,
             deviation_budget: int = 8, best_response: bool = True, x0=None, deviator: int = 0,
             step: float | None = None, threads: int = 1) -> NashGapEstimate:
    """Largest cost improvement one player finds by deviating from the MFG policy.

    Every deviation is evaluated on the same noise as the baseline
    (paired seeds).  The best response is the single-agent optimum against
    the MFG flow, both in the limit model and in the model seen by one of N
    players (own weight 1/N in the empirical measure); the other candidates
    perturb the policy's thresholds.
    """
    if not solution.converged:
        raise ModelError("MFG solution did not converge")
    if not 0 <= deviator < N:
        raise ModelError("deviator index out of range")
    policy = solution.policy
    grid = policy.grid
    x0 = solution.mu0 if x0 is None else x0
    if x0 is None:
        raise ModelError("no initial law: pass x0")
    candidates = []
    if best_response:
        br = extract_policy(solve_hjb(spec, solution.flow, grid), spec)
        candidates.append(("best-response", br))
        own = finite_player_spec(spec, N)
        br_n = extract_policy(solve_hjb(own, solution.flow, grid), own)
        candidates.append(("best-response-N", br_n))
    candidates += perturbed_policies(policy, deviation_budget, step)
    if not candidates:
        return NashGapEstimate(0.0, 0.0, N, "none")

    xs, z = _setup(grid, N, n_rep, seed, x0, threads)
    base_acts, pidx = _stack(policy, N, grid)
    base, _ = _simulate(spec, grid, base_acts, pidx, xs, z)
    c_base = base[:, deviator]
    pidx_dev = np.zeros(N, dtype=np.int64)
    pidx_dev[deviator] = 1
    gains = {}
    for name, dev in candidates:
        acts = np.stack([policy.action, dev.action])
        cost, _ = _simulate(spec, grid, acts, pidx_dev, xs, z)
        diff = c_base - cost[:, deviator]
        se = float(diff.std(ddof=1) / math.sqrt(n_rep)) if n_rep > 1 else math.nan
        gains[name] = (float(diff.mean()), se)
    name = max(gains, key=lambda k: gains[k][0])
    g, se = gains[name]
    if g <= 0:
        return NashGapEstimate(0.0, se, N, name, gains)
    return NashGapEstimate(g, se, N, name, gains)


@dataclass
class ScalingFit:
    slope: float
    intercept: float
    r2: float
    degenerate: bool = False


def scaling_fit(Ns, values) -> ScalingFit:
    """Least-squares fit of ``log(value)`` against ``log(N)``."""
    Ns = np.asarray(Ns, dtype=float)
    v = np.asarray(values, dtype=float)
    if Ns.size != v.size:
        raise ValueError("Ns and values differ in length")
    if Ns.size < 3:
        raise ValueError("need at least 3 points for a scaling fit")
    if np.all(v == 0):
        return ScalingFit(math.nan, math.nan, math.nan, degenerate=True)
    if np.any(v <= 0) or np.any(Ns <= 0):
        raise ValueError("scaling fit needs positive values")
    lx, ly = np.log(Ns), np.log(v)
    slope, intercept = np.polyfit(lx, ly, 1)
    pred = slope * lx + intercept
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum((ly - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(slope), float(intercept), r2)
