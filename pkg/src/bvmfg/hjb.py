"""Backward HJB solve for a frozen measure flow and bang-bang policy extraction.

Scheme: explicit Euler backward in time.  For each candidate control
``u in {+theta, 0, -theta}`` the advection ``(b + u) v_x`` uses the one-sided
difference selected by the sign of ``b + u``; the Hamiltonian is the minimum
of the three resulting affine expressions.  Diffusion is the centred second
difference.  At the two boundary nodes ``v`` is extrapolated linearly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measures import MeasureFlow
from .model import CoefficientEvaluator, Grid, ModelError, ModelSpec, is_rational


@dataclass(frozen=True, eq=False)
class ValueField:
    values: np.ndarray  # (nt, nx)
    grid: Grid
    flow: MeasureFlow | None = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ModelError("value field has non-finite entries")

    def at(self, n: int, x) -> np.ndarray:
        return np.interp(x, self.grid.x, self.values[n])

    def gradient(self) -> np.ndarray:
        """Centred in the interior, one-sided at the ends."""
        return np.gradient(self.values, self.grid.dx, axis=1, edge_order=1)


@dataclass(frozen=True, eq=False)
class BangBangPolicy:
    """Feedback control ``phi(t_n, x_i)`` with values in {+theta, 0, -theta}.

    ``lower_boundary[n]`` is the largest x with ``phi = +theta`` switching to a
    larger-x inaction (or -theta) region; ``upper_boundary[n]`` the smallest x
    where ``phi = -theta`` begins.  NaN means the region is empty.
    """

    action: np.ndarray
    lower_boundary: np.ndarray
    upper_boundary: np.ndarray
    grid: Grid
    theta: float
    rational: bool = True

    def node_index(self, x) -> np.ndarray:
        g = self.grid
        idx = np.rint((np.asarray(x, dtype=float) - g.x_lo) / g.dx)
        return np.clip(idx, 0, g.nx - 1).astype(np.int64)

    def at(self, n: int, x) -> np.ndarray:
        """Nearest-node lookup at time node ``n``."""
        return self.action[n][self.node_index(x)]

    @property
    def plus(self) -> np.ndarray:
        return np.maximum(self.action, 0.0)

    @property
    def minus(self) -> np.ndarray:
        return np.maximum(-self.action, 0.0)

    @classmethod
    def from_action(cls, action, grid: Grid, theta: float) -> "BangBangPolicy":
        action = np.asarray(action, dtype=float)
        lo, hi = _boundaries_from_action(action, grid.x)
        rational = all(rational_with_slack(row) for row in action)
        return cls(action, lo, hi, grid, theta, rational)

    @classmethod
    def constant(cls, grid: Grid, theta: float, value: float = 0.0) -> "BangBangPolicy":
        return cls.from_action(np.full((grid.nt, grid.nx), float(value)), grid, theta)

    @classmethod
    def from_thresholds(cls, grid: Grid, theta: float, lower, upper) -> "BangBangPolicy":
        """``+theta`` for ``x <= lower``, ``-theta`` for ``x >= upper``, 0 between."""
        x = grid.x
        lower = np.broadcast_to(np.asarray(lower, dtype=float), (grid.nt,))
        upper = np.broadcast_to(np.asarray(upper, dtype=float), (grid.nt,))
        tol = 1e-9 * grid.dx  # thresholds landing on a node include it on both sides alike
        act = np.zeros((grid.nt, grid.nx))
        act[x[None, :] <= lower[:, None] + tol] = theta
        act[x[None, :] >= upper[:, None] - tol] = -theta
        return cls(act, lower.copy(), upper.copy(), grid, theta, bool(np.all(lower <= upper)))


def rational_with_slack(row: np.ndarray, slack: int = 1) -> bool:
    """Nonincreasing in x, ignoring increases between nodes closer than ``slack + 1``."""
    row = np.asarray(row)
    if slack <= 0:
        return is_rational(row)
    k = slack + 1
    if row.size <= k:
        return True
    # running max of later values must not exceed the value k nodes earlier
    later_max = np.maximum.accumulate(row[::-1])[::-1]
    return bool(np.all(later_max[k:] <= row[:-k] + 1e-14))


def _boundaries_from_action(action: np.ndarray, x: np.ndarray):
    nt = action.shape[0]
    lo = np.full(nt, np.nan)
    hi = np.full(nt, np.nan)
    for n in range(nt):
        plus = np.flatnonzero(action[n] > 0)
        minus = np.flatnonzero(action[n] < 0)
        if plus.size:
            lo[n] = x[plus[-1]]
        if minus.size:
            hi[n] = x[minus[0]]
    return lo, hi


# ---------------------------------------------------------------- operators


def hamiltonian(p, b, f, g1, g2, theta):
    """``min{(p + g1) theta, (-p + g2) theta, 0} + b p + f`` (exact continuous form)."""
    return np.minimum(np.minimum((p + g1) * theta, (-p + g2) * theta), 0.0) + b * p + f


def brute_force_hamiltonian(p, b, f, g1, g2, theta, n: int = 101):
    """Minimum of the affine control expression over an n x n grid of (xi+, xi-)."""
    u = np.linspace(0.0, theta, n)
    up, um = np.meshgrid(u, u, indexing="ij")
    val = (b + up - um) * p + f + g1 * up + g2 * um
    return float(val.min())


def _advect(beta, dplus, dminus):
    return np.where(beta > 0, beta * dplus, beta * dminus)


def scheme_operator(v, b, f, g1, g2, theta, sigma, dx, action=None):
    """Discrete ``H(v)`` at interior nodes: the right side of ``-v_t = H``.

    With ``action`` given (a fixed policy row) the minimum is replaced by
    that control.
    """
    dp = (v[2:] - v[1:-1]) / dx
    dm = (v[1:-1] - v[:-2]) / dx
    d2 = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (dx * dx)
    bi, fi, g1i, g2i = b[1:-1], f[1:-1], g1[1:-1], g2[1:-1]
    if action is None:
        h = np.minimum(
            np.minimum(_advect(bi + theta, dp, dm) + g1i * theta,
                       _advect(bi - theta, dp, dm) + g2i * theta),
            _advect(bi, dp, dm),
        )
    else:
        u = action[1:-1]
        h = _advect(bi + u, dp, dm) + g1i * np.maximum(u, 0.0) + g2i * np.maximum(-u, 0.0)
    return h + fi + 0.5 * sigma * sigma * d2


def _extrapolate(v):
    v[0] = 2.0 * v[1] - v[2]
    v[-1] = 2.0 * v[-2] - v[-3]


def _check_inputs(spec: ModelSpec, flow: MeasureFlow, grid: Grid):
    grid.check_cfl(spec)
    if flow.densities.shape != (grid.nt, grid.nx):
        raise ModelError(
            f"flow shape {flow.densities.shape} does not match grid {(grid.nt, grid.nx)}"
        )


def _coefficients(spec, flow, grid):
    ev = CoefficientEvaluator(spec, grid)
    x = grid.x
    g1 = np.broadcast_to(spec.g1(x), x.shape).astype(float)
    g2 = np.broadcast_to(spec.g2(x), x.shape).astype(float)
    return ev, g1, g2


def solve_hjb(spec: ModelSpec, flow: MeasureFlow, grid: Grid,
              policy: BangBangPolicy | None = None) -> ValueField:
    """Value function for the frozen flow; with ``policy`` it evaluates that policy instead."""
    _check_inputs(spec, flow, grid)
    ev, g1, g2 = _coefficients(spec, flow, grid)
    V = np.empty((grid.nt, grid.nx))
    V[-1] = np.broadcast_to(spec.terminal_cost(grid.x), (grid.nx,))
    dt, dx = grid.dt, grid.dx
    for n in range(grid.nt - 1, 0, -1):
        dens = flow.densities[n]
        b, f = ev.drift(dens), ev.cost(dens)
        act = None if policy is None else policy.action[n]
        v = V[n]
        out = V[n - 1]
        out[1:-1] = v[1:-1] + dt * scheme_operator(v, b, f, g1, g2, spec.theta, spec.sigma, dx, act)
        _extrapolate(out)
    return ValueField(V, grid, flow)


def hjb_residual(value: ValueField, spec: ModelSpec, flow: MeasureFlow,
                 policy: BangBangPolicy | None = None) -> np.ndarray:
    """``(v^{n} - v^{n-1})/dt + H_n(v^n)`` on interior nodes, shape (nt-1, nx-2)."""
    grid = value.grid
    ev, g1, g2 = _coefficients(spec, flow, grid)
    V = value.values
    res = np.empty((grid.nt - 1, grid.nx - 2))
    for n in range(grid.nt - 1, 0, -1):
        dens = flow.densities[n]
        act = None if policy is None else policy.action[n]
        H = scheme_operator(V[n], ev.drift(dens), ev.cost(dens), g1, g2, spec.theta,
                            spec.sigma, grid.dx, act)
        res[n - 1] = (V[n, 1:-1] - V[n - 1, 1:-1]) / grid.dt + H
    return res


def truncation_bound(spec: ModelSpec, value: ValueField) -> float:
    """Rough local truncation estimate ``C (dx + dt)`` from the field's own derivatives."""
    V = value.values
    g = value.grid
    d2 = np.abs(np.diff(V, 2, axis=1)).max() / g.dx**2
    dtt = np.abs(np.diff(V, 2, axis=0)).max() / g.dt**2 if g.nt > 2 else 0.0
    bound = spec.drift_bound(g) + spec.theta
    return float(bound * d2 * g.dx + dtt * g.dt + 1e-12)


# ---------------------------------------------------------------- policy


def extract_policy(value: ValueField, spec: ModelSpec) -> BangBangPolicy:
    """Bang-bang control from the value gradient.

    ``+theta`` where ``v_x < -g1``, ``-theta`` where ``v_x > g2`` and 0 otherwise
    (ties go to 0).  Boundaries come from linear interpolation of the zero
    crossings of ``v_x + g1`` and ``v_x - g2``.
    """
    grid = value.grid
    x = grid.x
    p = value.gradient()
    g1 = np.broadcast_to(spec.g1(x), x.shape)
    g2 = np.broadcast_to(spec.g2(x), x.shape)
    theta = spec.theta
    act = np.where(p < -g1, theta, np.where(p > g2, -theta, 0.0))
    if theta == 0:
        act = np.zeros_like(act)
    lower = np.array([_last_upcrossing(p[n] + g1, x) for n in range(grid.nt)])
    upper = np.array([_first_upcrossing(p[n] - g2, x) for n in range(grid.nt)])
    rational = all(rational_with_slack(row) for row in act)
    return BangBangPolicy(act, lower, upper, grid, theta, rational)


def _crossings(s: np.ndarray, x: np.ndarray) -> np.ndarray:
    """x where s crosses from <0 to >=0 between adjacent nodes, linearly interpolated."""
    idx = np.flatnonzero((s[:-1] < 0) & (s[1:] >= 0))
    s0, s1 = s[idx], s[idx + 1]
    return x[idx] + (x[idx + 1] - x[idx]) * (-s0) / (s1 - s0)


def _last_upcrossing(s, x) -> float:
    c = _crossings(s, x)
    return float(c[-1]) if c.size else math.nan


def _first_upcrossing(s, x) -> float:
    c = _crossings(s, x)
    return float(c[0]) if c.size else math.nan
