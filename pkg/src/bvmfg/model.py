"""Problem data for mean field games with bounded-velocity singular controls.

A :class:`ModelSpec` bundles the interaction kernels ``b0(x, y)``, ``f0(x, y)``,
the control cost weights ``g1``, ``g2``, the diffusion ``sigma``, the speed
bound ``theta`` and the horizon.  All callables must be numpy-vectorized.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np
from scipy.interpolate import RegularGridInterpolator

Kernel = Callable[[np.ndarray, np.ndarray], np.ndarray]
StateFn = Callable[[np.ndarray], np.ndarray]


class ModelError(ValueError):
    """Invalid model configuration."""


def _zero_state(x):
    return np.zeros_like(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    b0: Kernel
    f0: Kernel
    g1: StateFn
    g2: StateFn
    sigma: float
    theta: float
    horizon: float
    domain: tuple[float, float]
    terminal_cost: StateFn = _zero_state
    # Optional shortcuts when a coefficient depends on the measure only
    # through its mean: (x, m) -> value.  Used instead of the kernel quadrature.
    drift_of_mean: Callable[[np.ndarray, float], np.ndarray] | None = None
    cost_of_mean: Callable[[np.ndarray, float], np.ndarray] | None = None
    family: str = "custom"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ModelError(f"sigma must be > 0, got {self.sigma}")
        if not self.theta >= 0:
            raise ModelError(f"theta must be >= 0, got {self.theta}")
        if not self.horizon > 0:
            raise ModelError(f"horizon must be > 0, got {self.horizon}")
        lo, hi = self.domain
        if not lo < hi:
            raise ModelError(f"empty domain [{lo}, {hi}]")

    @property
    def x_lo(self) -> float:
        return float(self.domain[0])

    @property
    def x_hi(self) -> float:
        return float(self.domain[1])

    def replace(self, **changes) -> "ModelSpec":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ModelSpec(**kw)

    def drift_bound(self, grid: "Grid") -> float:
        """Sampled bound on |b(x, mu)| over grid nodes, valid for any mu on the grid."""
        x = grid.x
        return float(np.max(np.abs(self.b0(x[:, None], x[None, :]))))


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid on ``[x_lo, x_hi] x [0, T]``."""

    x_lo: float
    x_hi: float
    nx: int
    horizon: float
    nt: int

    def __post_init__(self):
        if self.nx < 3:
            raise ModelError("nx must be >= 3")
        if self.nt < 2:
            raise ModelError("nt must be >= 2")
        if not self.x_lo < self.x_hi:
            raise ModelError("x_lo must be < x_hi")

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / (self.nx - 1)

    @property
    def dt(self) -> float:
        return self.horizon / (self.nt - 1)

    @property
    def x(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.nx)

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.nt)

    def max_stable_dt(self, spec: ModelSpec) -> float:
        dx = self.dx
        return dx * dx / (spec.sigma**2 + dx * (spec.drift_bound(self) + spec.theta))

    def cfl_ok(self, spec: ModelSpec) -> bool:
        return self.dt <= self.max_stable_dt(spec) * (1 + 1e-12)

    def check_cfl(self, spec: ModelSpec) -> None:
        if not self.cfl_ok(spec):
            raise ModelError(
                f"CFL violated: dt={self.dt:.3e} > {self.max_stable_dt(spec):.3e}; increase nt"
            )

    def same_as(self, other: "Grid") -> bool:
        return (self.nx, self.nt) == (other.nx, other.nt) and np.allclose(
            [self.x_lo, self.x_hi, self.horizon], [other.x_lo, other.x_hi, other.horizon]
        )


def make_grid(spec: ModelSpec, nx: int, nt: int | None = None, safety: float = 0.9) -> Grid:
    """Grid on the model's domain; picks the smallest stable ``nt`` when not given."""
    probe = Grid(spec.x_lo, spec.x_hi, nx, spec.horizon, 2)
    if nt is None:
        nt = int(math.ceil(spec.horizon / (safety * probe.max_stable_dt(spec)))) + 1
    return Grid(spec.x_lo, spec.x_hi, nx, spec.horizon, max(int(nt), 2))


@dataclass
class AssumptionReport:
    a3_ok: bool  # -g1 <= g2 at every node
    a3_margin: float  # min(g1 + g2)
    lipschitz_estimates: dict[str, float]
    bounds: dict[str, float]
    a4_checked_policies: list[bool] = field(default_factory=list)  # monotonicity verdicts

    def check_policy(self, action_row: np.ndarray, x: np.ndarray | None = None) -> bool:
        """Record and return the monotonicity verdict for one policy profile."""
        ok = is_rational(action_row, x)
        self.a4_checked_policies.append(ok)
        return ok


def is_rational(action: np.ndarray, x: np.ndarray | None = None) -> bool:
    """(x - y)(phi(x) - phi(y)) <= 0 for all sampled pairs."""
    a = np.asarray(action, dtype=float)
    if x is None:
        x = np.arange(a.size, dtype=float)
    order = np.argsort(x, kind="stable")
    a = a[order]
    # nonincreasing <=> every later value <= running minimum of earlier ones
    return bool(np.all(a[1:] <= np.minimum.accumulate(a)[:-1] + 1e-14))


def _lip_x(vals: np.ndarray, dx: float, axis: int) -> float:
    if vals.shape[axis] < 2:
        return 0.0
    return float(np.max(np.abs(np.diff(vals, axis=axis))) / dx)


def check_assumptions(spec: ModelSpec, grid: Grid) -> AssumptionReport:
    x = grid.x
    dx = grid.dx
    g1 = np.broadcast_to(spec.g1(x), x.shape)
    g2 = np.broadcast_to(spec.g2(x), x.shape)
    margin = float(np.min(g1 + g2))
    B = spec.b0(x[:, None], x[None, :]) * np.ones((x.size, x.size))
    F = spec.f0(x[:, None], x[None, :]) * np.ones((x.size, x.size))
    lip = {
        "b0_x": _lip_x(B, dx, 0),
        "b0_y": _lip_x(B, dx, 1),
        "f0_x": _lip_x(F, dx, 0),
        "f0_y": _lip_x(F, dx, 1),
        "g1": _lip_x(g1[None, :], dx, 1),
        "g2": _lip_x(g2[None, :], dx, 1),
    }
    bounds = {
        "b0": float(np.max(np.abs(B))),
        "f0": float(np.max(np.abs(F))),
        "g1": float(np.max(np.abs(g1))),
        "g2": float(np.max(np.abs(g2))),
    }
    return AssumptionReport(margin >= 0, margin, lip, bounds)


# ---------------------------------------------------------------- measures


def _weights(mu) -> np.ndarray:
    return mu.density * mu.grid.dx


def mean_field_coeffs(spec: ModelSpec, x, mu) -> tuple[np.ndarray, np.ndarray]:
    """Drift ``b(x, mu)`` and running cost ``f(x, mu)`` at states ``x``.

    Integrals against ``mu`` use the node quadrature ``sum(k(x, y_j) rho_j dx)``.
    """
    x = np.asarray(x, dtype=float)
    w = _weights(mu)
    if abs(w.sum() - 1.0) > 1e-8:
        raise ModelError(f"measure not normalized (mass {w.sum():.12f})")
    y = mu.grid.x
    if spec.drift_of_mean is not None:
        b = spec.drift_of_mean(x, float(w @ y))
    else:
        b = spec.b0(x[..., None], y) @ w
    if spec.cost_of_mean is not None:
        f = spec.cost_of_mean(x, float(w @ y))
    else:
        f = spec.f0(x[..., None], y) @ w
    return np.broadcast_to(b, x.shape).astype(float), np.broadcast_to(f, x.shape).astype(float)


class CoefficientEvaluator:
    """Precomputes kernel matrices on a grid so that per-step evaluation is a matvec."""

    def __init__(self, spec: ModelSpec, grid: Grid):
        self.spec = spec
        x = grid.x
        self.x = x
        self.dx = grid.dx
        self._B = None if spec.drift_of_mean else spec.b0(x[:, None], x[None, :]) * np.ones((x.size,) * 2)
        self._F = None if spec.cost_of_mean else spec.f0(x[:, None], x[None, :]) * np.ones((x.size,) * 2)

    def drift(self, density: np.ndarray) -> np.ndarray:
        w = density * self.dx
        if self._B is None:
            return np.broadcast_to(self.spec.drift_of_mean(self.x, float(w @ self.x)), self.x.shape)
        return self._B @ w

    def cost(self, density: np.ndarray) -> np.ndarray:
        w = density * self.dx
        if self._F is None:
            return np.broadcast_to(self.spec.cost_of_mean(self.x, float(w @ self.x)), self.x.shape)
        return self._F @ w


# ---------------------------------------------------------------- families


def _const(v: float) -> StateFn:
    return lambda x: np.full(np.shape(x), float(v))


def _require(cfg: Mapping[str, Any], keys) -> dict[str, float]:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ModelError(f"missing parameter(s): {', '.join(missing)}")
    try:
        return {k: float(cfg[k]) for k in keys}
    except (TypeError, ValueError) as exc:
        raise ModelError(f"non-numeric parameter: {exc}") from None


def _domain(cfg, centre=0.0, half=3.0) -> tuple[float, float]:
    lo = float(cfg.get("x_lo", centre - half))
    hi = float(cfg.get("x_hi", centre + half))
    if not lo < hi:
        raise ModelError(f"x_lo ({lo}) must be < x_hi ({hi})")
    return lo, hi


def _systemic(cfg) -> ModelSpec:
    p = _require(cfg, ["a", "eps", "c", "r", "sigma", "theta", "T", "m"])
    a, eps, c, r, m = p["a"], p["eps"], p["c"], p["r"], p["m"]
    return ModelSpec(
        b0=lambda x, y: a * (y - x),
        f0=lambda x, y: 0.5 * eps * (y - x) ** 2,
        g1=_const(r),
        g2=_const(r),
        sigma=p["sigma"],
        theta=p["theta"],
        horizon=p["T"],
        domain=_domain(cfg, m),
        terminal_cost=lambda x: 0.5 * c * (m - np.asarray(x, dtype=float)) ** 2,
        drift_of_mean=lambda x, mean: a * (mean - x),
        cost_of_mean=lambda x, mean: 0.5 * eps * (mean - x) ** 2,
        family="systemic_risk",
        params=dict(p, rho=float(cfg.get("rho", 0.0))),
    )


def _decoupled(cfg) -> ModelSpec:
    # systemic-risk shape around a fixed target: no mean-field interaction
    p = _require(cfg, ["a", "eps", "c", "r", "sigma", "theta", "T", "target"])
    a, eps, c, k = p["a"], p["eps"], p["c"], p["target"]
    return ModelSpec(
        b0=lambda x, y: a * (k - x) + 0.0 * y,
        f0=lambda x, y: 0.5 * eps * (k - x) ** 2 + 0.0 * y,
        g1=_const(p["r"]),
        g2=_const(p["r"]),
        sigma=p["sigma"],
        theta=p["theta"],
        horizon=p["T"],
        domain=_domain(cfg, k),
        terminal_cost=lambda x: 0.5 * c * (k - np.asarray(x, dtype=float)) ** 2,
        family="decoupled",
        params=p,
    )


def _zero(cfg) -> ModelSpec:
    p = {"sigma": float(cfg.get("sigma", 0.5)), "theta": float(cfg.get("theta", 1.0)),
         "T": float(cfg.get("T", 1.0))}
    return ModelSpec(
        b0=lambda x, y: np.zeros(np.broadcast(x, y).shape),
        f0=lambda x, y: np.zeros(np.broadcast(x, y).shape),
        g1=_const(float(cfg.get("g1", 1.0))),
        g2=_const(float(cfg.get("g2", 1.0))),
        sigma=p["sigma"],
        theta=p["theta"],
        horizon=p["T"],
        domain=_domain(cfg),
        family="zero",
        params=p,
    )


class TabulatedKernel:
    """Bilinear interpolation of kernel values tabulated on an (x, y) grid."""

    def __init__(self, xs, ys, values):
        self.xs = np.asarray(xs, dtype=float)
        self.ys = np.asarray(ys, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self._interp = RegularGridInterpolator(
            (self.xs, self.ys), self.values, method="linear", bounds_error=False, fill_value=None
        )

    @classmethod
    def from_csv(cls, path) -> "TabulatedKernel":
        """CSV layout: header ``x\\y, y_1, ..., y_m``; then rows ``x_i, k(x_i, y_1), ...``."""
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        try:
            ys = [float(v) for v in rows[0][1:]]
            xs = [float(r[0]) for r in rows[1:]]
            vals = [[float(v) for v in r[1:]] for r in rows[1:]]
            return cls(xs, ys, vals)
        except (IndexError, ValueError) as exc:
            raise ModelError(f"malformed kernel table {path}: {exc}") from None

    def __call__(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
        pts = np.stack([np.clip(x, self.xs[0], self.xs[-1]), np.clip(y, self.ys[0], self.ys[-1])], -1)
        return self._interp(pts)


def _tabulated(cfg) -> ModelSpec:
    p = _require(cfg, ["sigma", "theta", "T"])
    kernels = {}
    for name in ("b0", "f0"):
        src = cfg.get(f"{name}_table")
        if src is None:
            kernels[name] = lambda x, y: np.zeros(np.broadcast(x, y).shape)
        elif isinstance(src, TabulatedKernel):
            kernels[name] = src
        else:
            kernels[name] = TabulatedKernel.from_csv(src)
    xs = [k.xs for k in kernels.values() if isinstance(k, TabulatedKernel)]
    default_dom = (float(xs[0][0]), float(xs[0][-1])) if xs else (-3.0, 3.0)
    lo = float(cfg.get("x_lo", default_dom[0]))
    hi = float(cfg.get("x_hi", default_dom[1]))
    if not lo < hi:
        raise ModelError(f"x_lo ({lo}) must be < x_hi ({hi})")
    return ModelSpec(
        b0=kernels["b0"],
        f0=kernels["f0"],
        g1=_const(float(cfg.get("g1", 1.0))),
        g2=_const(float(cfg.get("g2", 1.0))),
        sigma=p["sigma"],
        theta=p["theta"],
        horizon=p["T"],
        domain=(lo, hi),
        family="tabulated",
        params=p,
    )


FAMILIES: dict[str, Callable[[Mapping[str, Any]], ModelSpec]] = {
    "systemic_risk": _systemic,
    "decoupled": _decoupled,
    "zero": _zero,
    "tabulated": _tabulated,
}

SYSTEMIC_FIXTURE = {"a": 1.0, "eps": 1.0, "c": 1.0, "r": 0.1, "sigma": 0.5,
                    "theta": 1.0, "T": 1.0, "m": 0.0, "x_lo": -3.0, "x_hi": 3.0}


def build_model(config: Mapping[str, Any], check_nx: int = 61) -> ModelSpec:
    """Build a :class:`ModelSpec` from a flat mapping with a ``family`` key.

    Families: ``systemic_risk`` (a, eps, c, r, sigma, theta, T, m), ``decoupled``
    (same with ``target`` instead of ``m``), ``zero`` and ``tabulated``.  Any
    family accepts ``x_lo``/``x_hi``; ``zero``/``tabulated`` accept constant
    ``g1``/``g2``.  ``-g1 <= g2`` is checked on a ``check_nx``-node grid.
    """
    family = config.get("family")
    if family not in FAMILIES:
        raise ModelError(f"unknown model family {family!r}; choose from {sorted(FAMILIES)}")
    spec = FAMILIES[family](config)
    x = np.linspace(spec.x_lo, spec.x_hi, check_nx)
    if np.min(spec.g1(x) + spec.g2(x)) < 0:
        raise ModelError("control cost condition violated: -g1(x) > g2(x) somewhere on the grid")
    return spec
