"""Probability measures on a 1-D grid, measure flows and transport distances.

A :class:`Measure` stores a nodal density ``rho``; node ``i`` carries mass
``rho_i * dx``.  For transport purposes each node's mass is spread uniformly
over its cell ``[x_i - dx/2, x_i + dx/2]``, which makes the CDF piecewise
linear and the 1-D optimal transport problem exactly solvable.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import Grid

MASS_TOL = 1e-10


class MeasureError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Measure:
    density: np.ndarray
    grid: Grid

    def __post_init__(self):
        d = np.asarray(self.density, dtype=float)
        if d.shape != (self.grid.nx,):
            raise MeasureError(f"density has shape {d.shape}, grid has {self.grid.nx} nodes")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise MeasureError("density must be finite and nonnegative")
        mass = d.sum() * self.grid.dx
        if abs(mass - 1.0) > MASS_TOL:
            raise MeasureError(f"density integrates to {mass!r}, not 1")
        object.__setattr__(self, "density", d)

    @property
    def weights(self) -> np.ndarray:
        return self.density * self.grid.dx

    def mean(self) -> float:
        return float(self.weights @ self.grid.x)

    def variance(self) -> float:
        m = self.mean()
        return float(self.weights @ (self.grid.x - m) ** 2)

    def expect(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(self.weights @ fn(self.grid.x))

    def reflect(self, centre: float = 0.0) -> "Measure":
        """Mirror image about ``centre``; the grid must be symmetric about it."""
        if not np.isclose(self.grid.x_lo + self.grid.x_hi, 2 * centre):
            raise MeasureError("grid is not symmetric about the reflection centre")
        return Measure(self.density[::-1].copy(), self.grid)

    @classmethod
    def from_weights(cls, weights, grid: Grid) -> "Measure":
        w = np.clip(np.asarray(weights, dtype=float), 0.0, None)
        return cls(w / (w.sum() * grid.dx), grid)

    @classmethod
    def gaussian(cls, grid: Grid, mean: float = 0.0, var: float = 1.0) -> "Measure":
        x = grid.x
        return cls.from_weights(np.exp(-0.5 * (x - mean) ** 2 / var), grid)

    @classmethod
    def uniform(cls, grid: Grid, lo: float, hi: float) -> "Measure":
        x = grid.x
        half = 0.5 * grid.dx
        # exact cell overlap with [lo, hi]
        overlap = np.clip(np.minimum(x + half, hi) - np.maximum(x - half, lo), 0.0, None)
        return cls.from_weights(overlap, grid)

    @classmethod
    def point_mass(cls, grid: Grid, x0: float) -> "Measure":
        k = int(np.argmin(np.abs(grid.x - x0)))
        w = np.zeros(grid.nx)
        w[k] = 1.0
        return cls.from_weights(w, grid)


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Densities on every time node, ``densities[n]`` at ``t_n``."""

    densities: np.ndarray
    grid: Grid
    holder_beta: float | None = None
    holder_constant: float | None = None

    def __post_init__(self):
        d = np.asarray(self.densities, dtype=float)
        if d.shape != (self.grid.nt, self.grid.nx):
            raise MeasureError(f"flow has shape {d.shape}, expected {(self.grid.nt, self.grid.nx)}")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise MeasureError("flow densities must be finite and nonnegative")
        mass = d.sum(axis=1) * self.grid.dx
        if np.max(np.abs(mass - 1.0)) > MASS_TOL:
            raise MeasureError(f"flow mass off by {np.max(np.abs(mass - 1.0)):.3e}")
        object.__setattr__(self, "densities", d)

    def __len__(self) -> int:
        return self.grid.nt

    def __getitem__(self, n: int) -> Measure:
        return Measure(self.densities[n], self.grid)

    @property
    def weights(self) -> np.ndarray:
        return self.densities * self.grid.dx

    def means(self) -> np.ndarray:
        return self.weights @ self.grid.x

    def variances(self) -> np.ndarray:
        m = self.means()
        return np.einsum("tj,tj->t", self.weights, (self.grid.x[None, :] - m[:, None]) ** 2)

    @classmethod
    def constant(cls, mu: Measure, grid: Grid | None = None) -> "MeasureFlow":
        grid = grid or mu.grid
        return cls(np.tile(mu.density, (grid.nt, 1)), grid)

    def blend(self, other: "MeasureFlow", weight: float) -> "MeasureFlow":
        """``weight * other + (1 - weight) * self``."""
        return MeasureFlow(weight * other.densities + (1 - weight) * self.densities, self.grid)


# ---------------------------------------------------------------- transport


@dataclass(frozen=True)
class TransportDistance:
    p: int
    value: float

    def __float__(self) -> float:
        return self.value


def _face_cdf(weights: np.ndarray) -> np.ndarray:
    w = np.atleast_2d(weights)
    out = np.zeros((w.shape[0], w.shape[1] + 1))
    np.cumsum(w, axis=1, out=out[:, 1:])
    return out


def _abs_linear_integral(d0: np.ndarray, d1: np.ndarray, h: float) -> np.ndarray:
    """Exact integral of |linear| over a cell of width h with end values d0, d1."""
    a0, a1 = np.abs(d0), np.abs(d1)
    same = d0 * d1 >= 0
    s = a0 + a1
    crossing = np.divide(d0 * d0 + d1 * d1, 2 * s, out=np.zeros_like(s), where=s > 0)
    return h * np.where(same, 0.5 * s, crossing)


def d1_rows(wa: np.ndarray, wb: np.ndarray, dx: float) -> np.ndarray:
    """Row-wise W1 between arrays of nodal weights (same grid)."""
    diff = _face_cdf(wa) - _face_cdf(wb)
    return _abs_linear_integral(diff[:, :-1], diff[:, 1:], dx).sum(axis=1)


N_QUANTILES = 1024


def quantiles(mu: Measure, levels: np.ndarray) -> np.ndarray:
    """Quantile function of the cell-uniform density at probability ``levels``."""
    w = mu.weights
    cdf = _face_cdf(w)[0]
    cdf /= cdf[-1]
    faces = mu.grid.x_lo - 0.5 * mu.grid.dx + mu.grid.dx * np.arange(mu.grid.nx + 1)
    cell = np.clip(np.searchsorted(cdf, levels, side="left") - 1, 0, mu.grid.nx - 1)
    frac = np.divide(levels - cdf[cell], w[cell] / w.sum(), out=np.zeros_like(levels),
                     where=w[cell] > 0)
    return faces[cell] + np.clip(frac, 0.0, 1.0) * mu.grid.dx


def wasserstein(mu: Measure, nu: Measure, p: int = 1) -> TransportDistance:
    """``D^p(mu, nu)`` for p in {1, 2}.

    p=1 integrates ``|F_mu - F_nu|`` exactly over the piecewise-linear CDFs;
    p=2 is the L2 distance of quantile functions on 1024 midpoint levels.
    """
    if mu.grid.nx != nu.grid.nx or not np.allclose(mu.grid.x, nu.grid.x):
        raise MeasureError("measures live on different grids")
    if p == 1:
        return TransportDistance(1, float(d1_rows(mu.weights, nu.weights, mu.grid.dx)[0]))
    if p == 2:
        levels = (np.arange(N_QUANTILES) + 0.5) / N_QUANTILES
        d = quantiles(mu, levels) - quantiles(nu, levels)
        return TransportDistance(2, float(np.sqrt(np.mean(d * d))))
    raise MeasureError(f"unsupported order p={p}")


def flow_distance(a: MeasureFlow, b: MeasureFlow) -> np.ndarray:
    """``D^1(a_t, b_t)`` at every time node."""
    if a.densities.shape != b.densities.shape:
        raise MeasureError("flows have different shapes")
    return d1_rows(a.weights, b.weights, a.grid.dx)


def shift(mu: Measure, nodes: int) -> Measure:
    """Translate by an integer number of nodes (mass pushed off the grid is an error)."""
    d = np.zeros_like(mu.density)
    if nodes >= 0:
        if np.any(mu.density[mu.grid.nx - nodes:] > 0) and nodes:
            raise MeasureError("shift pushes mass off the grid")
        d[nodes:] = mu.density[: mu.grid.nx - nodes]
    else:
        if np.any(mu.density[:-nodes] > 0):
            raise MeasureError("shift pushes mass off the grid")
        d[:nodes] = mu.density[-nodes:]
    return Measure(d, mu.grid)


# ---------------------------------------------------------------- Hölder check


def default_test_functions(grid: Grid, count: int = 16) -> list[Callable[[np.ndarray], np.ndarray]]:
    """Capped soft thresholds ``clip(y - c, -1, 1)`` at spread centres (bounded by 1, 1-Lipschitz)."""
    centres = np.linspace(grid.x_lo, grid.x_hi, count + 2)[1:-1]
    return [lambda y, c=c: np.clip(y - c, -1.0, 1.0) for c in centres]


@dataclass(frozen=True)
class HolderResult:
    holds: bool
    constant: float
    beta: float


def holder_check(flow: MeasureFlow, beta: float, test_fns: Sequence[Callable] | None = None,
                 cap: float = 50.0) -> HolderResult:
    """Largest ``|<psi, mu_t> - <psi, mu_t'>| / |t - t'|^beta`` over node pairs and test functions.

    The witness family can only certify a violation; ``holds`` means no
    witness exceeded ``cap``.
    """
    if not 0 < beta <= 1:
        raise MeasureError("beta must lie in (0, 1]")
    if test_fns is None:
        test_fns = default_test_functions(flow.grid)
    if len(test_fns) == 0:
        raise MeasureError("empty test-function set")
    x = flow.grid.x
    psi = np.stack([np.broadcast_to(f(x), x.shape) for f in test_fns], axis=1)  # (nx, k)
    integrals = flow.weights @ psi  # (nt, k)
    t = flow.grid.t
    best = 0.0
    for n in range(len(t) - 1):
        num = np.abs(integrals[n + 1:] - integrals[n]).max(axis=1)
        den = (t[n + 1:] - t[n]) ** beta
        best = max(best, float(np.max(num / den)))
    return HolderResult(best <= cap, best, beta)


# ---------------------------------------------------------------- deposition


def empirical_measure(positions, grid: Grid) -> tuple[Measure, int]:
    """Cloud-in-cell deposition of particles; returns the measure and the clip count."""
    x = np.asarray(positions, dtype=float).ravel()
    if x.size == 0:
        raise MeasureError("no particles to deposit")
    if not np.all(np.isfinite(x)):
        raise MeasureError("non-finite particle positions")
    clipped = int(np.count_nonzero((x < grid.x_lo) | (x > grid.x_hi)))
    return Measure.from_weights(deposit(x, grid), grid), clipped


def deposit(x: np.ndarray, grid: Grid) -> np.ndarray:
    s = (np.clip(x, grid.x_lo, grid.x_hi) - grid.x_lo) / grid.dx
    i = np.minimum(np.floor(s).astype(np.int64), grid.nx - 2)
    frac = s - i
    w = np.bincount(i, weights=1.0 - frac, minlength=grid.nx)
    w += np.bincount(i + 1, weights=frac, minlength=grid.nx)
    return w / x.size


# ---------------------------------------------------------------- CSV


def fmt(v: float) -> str:
    """Shortest round-trip decimal."""
    return repr(float(v))


def write_field_csv(path, values: np.ndarray, grid: Grid) -> None:
    """Rows = time nodes, columns = grid nodes, header of x coordinates."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([fmt(v) for v in grid.x])
        for row in np.asarray(values):
            w.writerow([fmt(v) for v in row])


def read_field_csv(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    return np.array(rows[0], dtype=float), np.array(rows[1:], dtype=float)


def write_flow_csv(path, flow: MeasureFlow) -> None:
    write_field_csv(path, flow.densities, flow.grid)


def read_flow_csv(path, grid: Grid) -> MeasureFlow:
    x, vals = read_field_csv(path)
    if x.size != grid.nx or not np.allclose(x, grid.x):
        raise MeasureError("CSV x-coordinates do not match the grid")
    return MeasureFlow(vals, grid)
