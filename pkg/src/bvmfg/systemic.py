"""Interbank lending/borrowing example with bounded borrowing rate.

Each bank's log-reserve follows ``dx = (a(m - x) + xi') dt + sigma dW`` with
``|xi'| <= theta``, running cost ``r|xi'| + eps/2 (m - x)^2`` and terminal cost
``c/2 (m - x)^2``.  The value function is symmetric about the mean ``m``; the
optimal policy pushes up below ``m - h`` and down above ``m + h``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .forward import simulate_mckean_vlasov
from .hjb import BangBangPolicy, ValueField, extract_policy, solve_hjb
from .measures import Measure, MeasureFlow, deposit, flow_distance
from .model import Grid, ModelError, ModelSpec, build_model, make_grid
from .special import parabolic_cylinder

DEFAULT_INITIAL_VAR = 0.25


@dataclass(frozen=True)
class SystemicRiskParams:
    a: float = 1.0
    eps: float = 1.0
    c: float = 1.0
    r: float = 0.1
    sigma: float = 0.5
    theta: float = 1.0
    horizon: float = 1.0
    m0: float = 0.0
    rho: float = 0.0
    half_width: float = 3.0  # numerical domain is m0 +- half_width

    def __post_init__(self):
        if self.a < 0:
            raise ModelError("a must be >= 0")
        for k in ("eps", "c", "r", "theta"):
            if getattr(self, k) < 0:
                raise ModelError(f"{k} must be >= 0")
        if self.sigma <= 0:
            raise ModelError("sigma must be > 0")
        if self.horizon <= 0:
            raise ModelError("horizon must be > 0")
        if not 0.0 <= self.rho <= 1.0:
            raise ModelError("rho must lie in [0, 1]")
        if self.half_width <= 0:
            raise ModelError("half_width must be > 0")

    @property
    def q(self) -> float:
        # the (m - x) cross term of the cost is excluded
        return 0.0

    def replace(self, **changes) -> "SystemicRiskParams":
        return replace(self, **changes)

    def config(self, coupled: bool = True) -> dict:
        cfg = {"a": self.a, "eps": self.eps, "c": self.c, "r": self.r, "sigma": self.sigma,
               "theta": self.theta, "T": self.horizon, "rho": self.rho,
               "x_lo": self.m0 - self.half_width, "x_hi": self.m0 + self.half_width}
        if coupled:
            cfg.update(family="systemic_risk", m=self.m0)
        else:
            cfg.update(family="decoupled", target=self.m0)
        return cfg

    def model_spec(self, coupled: bool = True) -> ModelSpec:
        """Mean-field model (``coupled``) or the control problem with the mean frozen at ``m0``."""
        return build_model(self.config(coupled))

    @classmethod
    def from_config(cls, cfg) -> "SystemicRiskParams":
        m0 = float(cfg.get("m", cfg.get("m0", 0.0)))
        lo, hi = cfg.get("x_lo"), cfg.get("x_hi")
        hw = 3.0
        if lo is not None and hi is not None:
            lo, hi = float(lo), float(hi)
            if abs((lo + hi) / 2 - m0) > 1e-12 * max(1.0, abs(hi - lo)):
                raise ModelError("domain must be centred on m")
            hw = (hi - lo) / 2
        keys = dict(a="a", eps="eps", c="c", r="r", sigma="sigma", theta="theta",
                    horizon="T", rho="rho")
        kw = {k: float(cfg[v]) for k, v in keys.items() if v in cfg}
        return cls(m0=m0, half_width=hw, **kw)


# ---------------------------------------------------------------- closed forms


@dataclass(frozen=True)
class CoefficientSet:
    """Time coefficients of the quadratic parts of the value function.

    ``eta`` belongs to the inaction region, ``zeta`` to the push-up region
    ``x < m - h`` and ``lambda`` to the push-down region ``x > m + h``.
    """

    params: SystemicRiskParams
    names = ("eta1", "eta3", "zeta1", "zeta2", "zeta3", "lambda1", "lambda2", "lambda3")

    def _common(self, s):
        p = self.params
        s = np.asarray(s, dtype=float)
        return p.a, p.eps, p.c, p.r, p.sigma, p.theta, s - p.horizon

    def eta1(self, s):
        a, e, c, r, sg, th, u = self._common(s)
        return (c / 2 - e / (4 * a)) * np.exp(2 * a * u) + e / (4 * a)

    def eta3(self, s):
        a, e, c, r, sg, th, u = self._common(s)
        k = c / 2 - e / (4 * a)
        return -sg**2 / (2 * a) * k * np.exp(2 * a * u) - sg**2 * e / (4 * a) * u + sg**2 / (2 * a) * k

    def zeta1(self, s):
        a, e, c, r, sg, th, u = self._common(s)
        return (c / 2 - e / (4 * a)) * np.exp(2 * a * u) + e / (4 * a)

    def zeta2(self, s):
        a, e, c, r, sg, th, u = self._common(s)
        return (-(th / a) * (c - e / a) * np.exp(a * u) + (th / a) * (c - e / (2 * a)) * np.exp(2 * a * u)
                - th * e / (2 * a * a))

    def zeta3(self, s):
        a, e, c, r, sg, th, u = self._common(s)
        return ((-r * th - th**2 * e / (2 * a * a) - e * sg**2 / (4 * a)) * u
                - th**2 / a**2 * (c - e / a) * (np.exp(a * u) - 1)
                + (th**2 / (2 * a * a) * (c - e / (2 * a)) - sg**2 / (2 * a) * (c / 2 - e / (4 * a)))
                * (np.exp(2 * a * u) - 1))

    def lambda1(self, s):
        a, e, c, r, sg, th, u = self._common(s)
        return (c / 2 - e / (4 * a)) * np.exp(2 * a * u) + e / (4 * a)

    def lambda2(self, s):
        a, e, c, r, sg, th, u = self._common(s)
        return ((th / a) * (c - e / a) * np.exp(a * u) - (th / a) * (c - e / (2 * a)) * np.exp(2 * a * u)
                + th * e / (2 * a * a))

    def lambda3(self, s):
        a, e, c, r, sg, th, u = self._common(s)
        return ((-r * th - th**2 * e / (2 * a * a) - e * sg**2 / (4 * a)) * u
                - th**2 / a**2 * (c - e / a) * (np.exp(a * u) - 1)
                + (th**2 / (2 * a * a) * (c - e / (2 * a)) - sg**2 / (2 * a) * (c / 2 - e / (4 * a)))
                * (np.exp(2 * a * u) - 1))

    def table(self, n: int = 201) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        s = np.linspace(0.0, self.params.horizon, n)
        return s, {k: getattr(self, k)(s) for k in self.names}

    # ODE right-hand sides: residual(s, derivative) should vanish
    def ode_residual(self, name: str, s, ds) -> np.ndarray:
        p = self.params
        a, e, r, sg, th = p.a, p.eps, p.r, p.sigma, p.theta
        if name not in self.names:
            raise KeyError(name)
        f = getattr(self, name)(s)
        if name in ("eta1", "zeta1", "lambda1"):
            return ds - 2 * a * f + e / 2
        if name == "eta3":
            return ds + sg**2 * self.eta1(s)
        if name == "zeta2":
            return ds - a * f - 2 * th * self.zeta1(s)
        if name == "zeta3":
            return ds + r * th - th * self.zeta2(s) + sg**2 * self.zeta1(s)
        if name == "lambda2":
            return ds - a * f + 2 * th * self.lambda1(s)
        return ds + r * th + th * self.lambda2(s) + sg**2 * self.lambda1(s)

    def terminal_values(self) -> dict[str, float]:
        T = self.params.horizon
        return {k: float(getattr(self, k)(T)) for k in self.names}

    @property
    def expected_terminal(self) -> dict[str, float]:
        half_c = self.params.c / 2
        return {"eta1": half_c, "eta3": 0.0, "zeta1": half_c, "zeta2": 0.0, "zeta3": 0.0,
                "lambda1": half_c, "lambda2": 0.0, "lambda3": 0.0}


def coefficients(params: SystemicRiskParams) -> CoefficientSet:
    if params.a == 0:
        raise ModelError("closed-form coefficients need a != 0")
    return CoefficientSet(params)


def fourth_order_derivative(f, s, h: float = 1e-3) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    return (f(s - 2 * h) - 8 * f(s - h) + 8 * f(s + h) - f(s + 2 * h)) / (12 * h)


def coefficient_ode_residuals(cs: CoefficientSet, n: int = 200, h: float = 1e-3) -> dict[str, float]:
    """Max ODE residual of each coefficient over ``n`` times in [0, T]."""
    s = np.linspace(0.0, cs.params.horizon, n)
    return {k: float(np.max(np.abs(cs.ode_residual(k, s, fourth_order_derivative(getattr(cs, k), s, h)))))
            for k in cs.names}


def coefficient_identities(cs: CoefficientSet, n: int = 200) -> dict[str, float]:
    """Max deviation of the cross-region identities over ``n`` times."""
    s = np.linspace(0.0, cs.params.horizon, n)
    return {
        "eta1=zeta1": float(np.max(np.abs(cs.eta1(s) - cs.zeta1(s)))),
        "eta1=lambda1": float(np.max(np.abs(cs.eta1(s) - cs.lambda1(s)))),
        "zeta3=lambda3": float(np.max(np.abs(cs.zeta3(s) - cs.lambda3(s)))),
        "lambda2=-zeta2": float(np.max(np.abs(cs.lambda2(s) + cs.zeta2(s)))),
    }


# ---------------------------------------------------------------- transform domain


def particular_solution(params: SystemicRiskParams, lam: float, y):
    """Quadratic particular solution in ``y = m - x``: returns (value, d/dx, d2/dx2)."""
    a, e, sg, T = params.a, params.eps, params.sigma, params.horizon
    k = (1 - 1 / lam) * math.exp(-lam * T)
    A = e / (4 * a - 2 * lam) * k
    B = -sg**2 * e / (lam * (4 * a - 2 * lam)) * k
    y = np.asarray(y, dtype=float)
    return A * y**2 + B, -2 * A * y, np.full(y.shape, 2 * A)


def phi1_tilde(params: SystemicRiskParams, lam: float, y):
    """Fundamental solution at ``y = m - x``; its mirror is ``phi1_tilde(params, lam, -y)``."""
    a, sg = params.a, params.sigma
    y = np.asarray(y, dtype=float)
    return np.exp(a * y**2 / (2 * sg**2)) * parabolic_cylinder(lam / a, y * math.sqrt(2 * a) / sg)


def _transform_operator(params, lam, y, w, dw, d2w):
    # lam w + a (m - x) w_x + sigma^2/2 w_xx, derivatives taken in x
    return lam * w + params.a * y * dw + 0.5 * params.sigma**2 * d2w


@dataclass
class LaplaceResidual:
    particular: float
    spacings: np.ndarray
    homogeneous: np.ndarray  # max-norm residual per spacing
    order: float
    mirror_mismatch: float  # psi residual vs mirrored phi residual, relative


def _homogeneous_residual(params, lam, y, sign=1.0):
    # y uniform and increasing; x = m - y so d/dx = -d/dy
    dy = y[1] - y[0]
    w = phi1_tilde(params, lam, sign * y)
    dw = -(w[2:] - w[:-2]) / (2 * dy)
    d2w = (w[2:] - 2 * w[1:-1] + w[:-2]) / dy**2
    return _transform_operator(params, lam, y[1:-1], w[1:-1], dw, d2w)


def laplace_ode_residual(params: SystemicRiskParams, lam: float, y, levels: int = 3) -> LaplaceResidual:
    """Residuals of the transformed inaction-region equation.

    ``y`` is a uniform grid over ``m - x``.  The particular solution is checked
    exactly; the fundamental solution by centred differences on ``y`` and
    ``levels - 1`` successive halvings, compared on the coarse interior nodes.
    """
    if not lam < 0:
        raise ValueError("transform variable must be negative")
    y = np.asarray(y, dtype=float)
    if y.size < 3 or not np.allclose(np.diff(y), y[1] - y[0]):
        raise ValueError("y must be a uniform grid with at least 3 nodes")
    a, e, T = params.a, params.eps, params.horizon
    w, dw, d2w = particular_solution(params, lam, y)
    src = (1 - 1 / lam) * 0.5 * e * math.exp(-lam * T) * y**2
    part = float(np.max(np.abs(src + _transform_operator(params, lam, y, w, dw, d2w))))

    norms, spacings = [], []
    for k in range(levels):
        f = 2**k
        fine = np.linspace(y[0], y[-1], f * (y.size - 1) + 1)
        res = _homogeneous_residual(params, lam, fine)[f - 1::f]  # coarse interior nodes
        norms.append(float(np.max(np.abs(res))))
        spacings.append(fine[1] - fine[0])
    order = float(np.polyfit(np.log(spacings), np.log(norms), 1)[0])

    r_phi = _homogeneous_residual(params, lam, y)
    r_psi = _homogeneous_residual(params, lam, y, sign=-1.0)
    # psi(y) = phi(-y): its residual at y equals phi's at -y
    scale = max(float(np.max(np.abs(r_phi))), 1e-300)
    mirror = float(np.max(np.abs(r_psi - _homogeneous_residual(params, lam, -y[::-1])[::-1]))) / scale
    return LaplaceResidual(part, np.array(spacings), np.array(norms), order, mirror)


# ---------------------------------------------------------------- value function and boundary


@dataclass
class FreeBoundary:
    s: np.ndarray
    h: np.ndarray  # inf where there is no action region
    x1: np.ndarray
    x2: np.ndarray
    m: float

    @property
    def degenerate(self) -> np.ndarray:
        return ~np.isfinite(self.h)

    @property
    def fully_degenerate(self) -> bool:
        return bool(np.all(self.degenerate))

    @property
    def asymmetry(self) -> np.ndarray:
        """``(m - x1) - (x2 - m)`` per time node (NaN where degenerate)."""
        return (self.m - self.x1) - (self.x2 - self.m)


def symmetric_grid(params: SystemicRiskParams, nx: int = 121, nt: int | None = None) -> Grid:
    if nx % 2 == 0:
        raise ModelError("use an odd node count so m0 is a node")
    return make_grid(params.model_spec(), nx, nt)


def _require_symmetric(grid: Grid, m: float):
    tol = 1e-12 * max(1.0, grid.x_hi - grid.x_lo)
    if abs(0.5 * (grid.x_lo + grid.x_hi) - m) > tol:
        raise ModelError(f"grid [{grid.x_lo}, {grid.x_hi}] is not centred on m = {m}")


def solve_systemic_hjb(params: SystemicRiskParams, grid: Grid) -> tuple[ValueField, FreeBoundary]:
    """Value function with the mean frozen at ``m0`` and its free boundary ``m0 +- h``."""
    _require_symmetric(grid, params.m0)
    spec = params.model_spec(coupled=False)
    flow = MeasureFlow.constant(Measure.uniform(grid, grid.x_lo, grid.x_hi), grid)  # unused by the frozen-mean model
    value = solve_hjb(spec, flow, grid)
    pol = extract_policy(value, spec)
    x1, x2 = pol.lower_boundary.copy(), pol.upper_boundary.copy()
    m = params.m0
    h = np.where(np.isfinite(x1) & np.isfinite(x2), 0.5 * (x2 - x1),
                 np.where(np.isfinite(x2), x2 - m, np.where(np.isfinite(x1), m - x1, np.inf)))
    return value, FreeBoundary(grid.t, h, x1, x2, m)


def threshold_policy(fb: FreeBoundary, grid: Grid, theta: float) -> BangBangPolicy:
    """``+theta`` for ``x <= m - h``, 0 inside, ``-theta`` for ``x >= m + h``."""
    return BangBangPolicy.from_thresholds(grid, theta, fb.m - fb.h, fb.m + fb.h)


def policy_mismatch(a: BangBangPolicy, b: BangBangPolicy, fb: FreeBoundary, slack: int = 1) -> int:
    """Nodes where two policies differ, ignoring nodes within ``slack`` nodes of a boundary."""
    g = a.grid
    x = g.x
    near = np.zeros(a.action.shape, dtype=bool)
    for edge in (fb.m - fb.h, fb.m + fb.h):
        near |= np.abs(x[None, :] - edge[:, None]) <= slack * g.dx * (1 + 1e-9)
    return int(np.count_nonzero((a.action != b.action) & ~near))


def value_asymmetry(value: ValueField) -> float:
    V = value.values
    return float(np.max(np.abs(V - V[:, ::-1])))


def inner_remainder(value: ValueField, fb: FreeBoundary, params: SystemicRiskParams):
    """``v - eta1 (m-x)^2 - eta3`` on the inaction region (NaN outside) and its asymmetry about m."""
    cs = coefficients(params)
    s = value.grid.t[:, None]
    y = fb.m - value.grid.x[None, :]
    w = value.values - cs.eta1(s) * y**2 - cs.eta3(s)
    x = value.grid.x[None, :]
    inside = (x >= (fb.m - fb.h)[:, None]) & (x <= (fb.m + fb.h)[:, None])
    w = np.where(inside, w, np.nan)
    both = inside & inside[:, ::-1]
    diff = np.where(both, np.abs(w - w[:, ::-1]), 0.0)
    return w, float(diff.max())


def convexity_violations(value: ValueField, slack: int = 1, tol: float = 1e-10) -> int:
    """Time rows where ``v_x`` decreases in x beyond ``slack`` nodes of tolerance."""
    p = value.gradient()
    k = slack + 1
    bad = 0
    for row in p:
        later_min = np.minimum.accumulate(row[::-1])[::-1]
        if np.any(later_min[k:] < row[:-k] - tol):
            bad += 1
    return bad


@dataclass
class PastingReport:
    jumps: np.ndarray  # |v_xx| jump across x2 per checked time node
    floors: np.ndarray  # interior second-difference noise floor
    ratio: float  # max jump / floor
    times: np.ndarray


def smooth_pasting(value: ValueField, fb: FreeBoundary, skip_last: float = 0.1) -> PastingReport:
    """Compare the second-derivative jump across ``x2`` with its variation inside the regions.

    The jump is the change in the second difference between the nodes on
    either side of ``x2``; the floor is the largest change between
    neighbouring second differences away from both boundaries.  Time nodes
    within ``skip_last`` of the horizon (the terminal layer) are skipped.
    """
    g = value.grid
    x = g.x
    V = value.values
    d2 = (V[:, 2:] - 2 * V[:, 1:-1] + V[:, :-2]) / g.dx**2  # at x[1:-1]
    xi = x[1:-1]
    jumps, floors, times = [], [], []
    for n in range(g.nt):
        if g.t[n] > g.horizon - skip_last or not np.isfinite(fb.h[n]):
            continue
        j = int(np.searchsorted(xi, fb.x2[n]))  # first interior node right of x2
        if j < 2 or j + 2 >= xi.size:
            continue
        jumps.append(abs(d2[n, j] - d2[n, j - 1]))
        step = np.abs(np.diff(d2[n]))
        far = np.ones(step.size, dtype=bool)
        for edge in (fb.x1[n], fb.x2[n]):
            far &= np.abs(0.5 * (xi[1:] + xi[:-1]) - edge) > 2 * g.dx
        far[:3] = far[-3:] = False
        floors.append(step[far].max())
        times.append(g.t[n])
    jumps, floors = np.array(jumps), np.array(floors)
    ratio = float(np.max(jumps / floors)) if jumps.size else 0.0
    return PastingReport(jumps, floors, ratio, np.array(times))


# ---------------------------------------------------------------- forward checks


def default_initial(params: SystemicRiskParams, grid: Grid, var: float = DEFAULT_INITIAL_VAR) -> Measure:
    return Measure.gaussian(grid, params.m0, var)


def _is_symmetric(mu: Measure, m: float) -> bool:
    g = mu.grid
    if abs(0.5 * (g.x_lo + g.x_hi) - m) > 1e-12 * max(1.0, g.x_hi - g.x_lo):
        return False
    d = mu.density
    return bool(np.max(np.abs(d - d[::-1])) <= 1e-12 * max(float(d.max()), 1.0))


@dataclass
class MeanDriftReport:
    means: np.ndarray  # ensemble mean per time node
    drift: np.ndarray  # |mean - m0|
    balance: np.ndarray  # P(+theta) - P(-theta) per step
    max_drift: float
    bound: float  # 3 sigma sqrt(T/n) + 2 dx

    @property
    def passed(self) -> bool:
        return self.max_drift <= self.bound


def verify_fixed_point_mean(params: SystemicRiskParams, grid: Grid, n_particles: int, seed: int,
                            mu0: Measure | None = None, allow_asymmetric: bool = False,
                            policy: BangBangPolicy | None = None, threads: int = 1) -> MeanDriftReport:
    """Simulate the population under the threshold policy and track its mean."""
    if params.rho != 0:
        raise ModelError("mean check is for rho = 0; see common_noise_reduction")
    _require_symmetric(grid, params.m0)
    mu0 = mu0 if mu0 is not None else default_initial(params, grid)
    if not allow_asymmetric and not _is_symmetric(mu0, params.m0):
        raise ModelError("initial law is not symmetric about m0 (pass allow_asymmetric=True to override)")
    if policy is None:
        _, fb = solve_systemic_hjb(params, grid)
        policy = threshold_policy(fb, grid, params.theta)
    spec = params.model_spec()
    balance = np.zeros(grid.nt)

    def watch(n, x):
        if params.theta > 0:
            balance[n] = float(np.mean(policy.at(n, x))) / params.theta

    run = simulate_mckean_vlasov(spec, policy, mu0, n_particles, seed, grid=grid, threads=threads,
                                 observe=watch)
    drift = np.abs(run.means - params.m0)
    bound = 3 * params.sigma * math.sqrt(params.horizon / n_particles) + 2 * grid.dx
    return MeanDriftReport(run.means, drift, balance, float(drift.max()), bound)


@dataclass
class CommonNoiseReport:
    rho: float
    slope: float  # regression of mean increments on dW0
    slope_se: float
    expected_slope: float  # rho sigma
    tracking_error: float  # max_t |m_hat_t - m0 - rho sigma W0_t|
    distances: np.ndarray  # D1(law(x - m_hat), reference law(x - m0)) per time
    max_distance: float
    literal_max_distance: float  # same, against the run with rho = 0 and full sigma
    meta: dict = field(default_factory=dict)

    @property
    def slope_z(self) -> float:
        return abs(self.slope - self.expected_slope) / self.slope_se if self.slope_se > 0 else (
            0.0 if self.slope == self.expected_slope else math.inf)


def _centred_flow(spec, policy, mu0, n, seed, grid, rho, shocks, threads, recentre):
    # law of x - m_hat + m0 (recentre) or of x itself, deposited at every node
    dens = np.empty((grid.nt, grid.nx))
    m0 = 0.5 * (grid.x_lo + grid.x_hi)

    def watch(k, x):
        c = x - np.mean(x) + m0 if recentre else x
        dens[k] = deposit(np.clip(c, grid.x_lo, grid.x_hi), grid) / grid.dx

    run = simulate_mckean_vlasov(spec, policy, mu0, n, seed, common_noise_rho=rho, grid=grid,
                                 threads=threads, recenter_policy=True, common_shocks=shocks,
                                 observe=watch)
    return MeasureFlow(dens, grid), run


def common_noise_reduction(params: SystemicRiskParams, grid: Grid, n_particles: int, seed: int,
                           mu0: Measure | None = None, policy: BangBangPolicy | None = None,
                           threads: int = 1) -> CommonNoiseReport:
    """Check that the common shock moves only the mean.

    The population is simulated with common noise and the policy read
    relative to the realised mean.  Its law of ``x - m_hat`` is compared in
    D1 with the law of ``x - m0`` from the same seed with the common shocks
    switched off (idiosyncratic volatility ``sigma sqrt(1 - rho^2)`` unchanged).
    The comparison against a run with ``rho = 0`` and full ``sigma`` is
    reported alongside.
    """
    if not 0 < params.rho <= 1:
        raise ModelError("common-noise reduction needs rho in (0, 1]")
    _require_symmetric(grid, params.m0)
    mu0 = mu0 if mu0 is not None else default_initial(params, grid)
    if policy is None:
        _, fb = solve_systemic_hjb(params.replace(rho=0.0), grid)
        policy = threshold_policy(fb, grid, params.theta)
    spec = params.model_spec()
    rho = params.rho
    live, run = _centred_flow(spec, policy, mu0, n_particles, seed, grid, rho, True, threads, True)
    ref, _ = _centred_flow(spec, policy, mu0, n_particles, seed, grid, rho, False, threads, False)
    lit, _ = _centred_flow(spec, policy, mu0, n_particles, seed, grid, 0.0, False, threads, False)

    dm = np.diff(run.means)
    dw = run.common_increments
    X = np.column_stack([np.ones_like(dw), dw])
    coef, *_ = np.linalg.lstsq(X, dm, rcond=None)
    resid = dm - X @ coef
    dof = max(dm.size - 2, 1)
    s2 = float(resid @ resid) / dof
    sxx = float(np.sum((dw - dw.mean()) ** 2))
    se = math.sqrt(s2 / sxx) if sxx > 0 else math.inf

    w0 = np.concatenate([[0.0], np.cumsum(dw)])
    track = float(np.max(np.abs(run.means - params.m0 - rho * params.sigma * w0)))
    d = flow_distance(live, ref)
    d_lit = flow_distance(live, lit)
    return CommonNoiseReport(rho, float(coef[1]), se, rho * params.sigma, track, d, float(d.max()),
                             float(d_lit.max()))
