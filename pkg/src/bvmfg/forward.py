"""Population law under a fixed feedback policy.

Two independent routes: a conservative finite-volume Fokker-Planck solver
on the grid and a McKean-Vlasov particle simulation whose drift uses the
ensemble's own empirical measure.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .hjb import BangBangPolicy
from .measures import Measure, MeasureError, MeasureFlow, deposit, flow_distance, quantiles
from .model import CoefficientEvaluator, Grid, ModelError, ModelSpec

log = logging.getLogger(__name__)


@dataclass
class FokkerPlanckDiagnostics:
    mass_error: np.ndarray  # per step, |mass_{n+1} - mass_n|
    clipped_mass: float = 0.0
    boundary_flux: float = 0.0  # zero-flux walls: identically 0


def solve_fokker_planck(spec: ModelSpec, policy: BangBangPolicy, mu0: Measure, grid: Grid,
                        diagnostics: bool = False):
    """Explicit finite-volume solve of ``mu_t = -((b + phi) mu)_x + sigma^2/2 mu_xx``.

    Advective face fluxes are upwinded on the nodal velocity
    ``F = max(v_i, 0) rho_i + min(v_{i+1}, 0) rho_{i+1}``; the diffusive flux is
    centred; both walls carry zero flux.  The drift's measure argument is the
    density at the start of each step.
    """
    grid.check_cfl(spec)
    if policy.action.shape != (grid.nt, grid.nx):
        raise ModelError("policy is defined on a different grid")
    if mu0.grid.nx != grid.nx:
        raise MeasureError("initial measure is on a different grid")
    ev = CoefficientEvaluator(spec, grid)
    dt, dx = grid.dt, grid.dx
    lam = dt / dx
    diff = 0.5 * spec.sigma**2 / dx
    R = np.empty((grid.nt, grid.nx))
    R[0] = mu0.density
    mass_err = np.zeros(grid.nt - 1)
    clipped = 0.0
    flux = np.zeros(grid.nx + 1)
    for n in range(grid.nt - 1):
        rho = R[n]
        vel = ev.drift(rho) + policy.action[n]
        flux[1:-1] = (np.maximum(vel[:-1], 0.0) * rho[:-1] + np.minimum(vel[1:], 0.0) * rho[1:]
                      - diff * (rho[1:] - rho[:-1]))
        new = rho - lam * (flux[1:] - flux[:-1])
        neg = new < 0
        if np.any(neg):
            lost = -new[neg].sum() * dx
            if lost > 1e-13:
                log.warning("Fokker-Planck step %d clipped %.3e of negative mass", n, lost)
            clipped += lost
            new[neg] = 0.0
        mass_err[n] = abs((new.sum() - rho.sum()) * dx)
        R[n + 1] = new
    flow = MeasureFlow(R, grid)
    if diagnostics:
        return flow, FokkerPlanckDiagnostics(mass_err, clipped)
    return flow


def boundary_mass(flow: MeasureFlow, nodes: int = 5) -> float:
    """Largest mass found within ``nodes`` nodes of either wall, over all times."""
    w = flow.weights
    return float(max(w[:, :nodes].sum(axis=1).max(), w[:, -nodes:].sum(axis=1).max()))


# ---------------------------------------------------------------- particles


@dataclass
class ParticleEnsemble:
    positions: np.ndarray
    time_index: int
    seed: int
    stream_offsets: np.ndarray  # particle index = counter position in its stream


@dataclass
class ParticleRun:
    flow: MeasureFlow
    ensembles: list[ParticleEnsemble]
    means: np.ndarray  # ensemble mean at each time node
    common_increments: np.ndarray  # dW0 per step (zeros when rho = 0)
    clipped: int = 0
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.flow
        yield self.ensembles


def sample_measure(mu: Measure, n: int, seed: int, stream: int = rng.INITIAL,
                   threads: int = 1) -> np.ndarray:
    """Inverse-CDF samples from the cell-uniform density of ``mu``."""
    u = rng.uniforms(seed, stream, 0, 0, n)
    return quantiles(mu, u)


def reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x = np.where(x < lo, 2 * lo - x, x)
    x = np.where(x > hi, 2 * hi - x, x)
    return np.clip(x, lo, hi)


def particle_drift(spec: ModelSpec, ev: CoefficientEvaluator | None, grid: Grid,
                   x: np.ndarray) -> np.ndarray:
    """``b(x_i, empirical measure)``; exact via the mean when the model allows it."""
    if spec.drift_of_mean is not None:
        return np.broadcast_to(spec.drift_of_mean(x, float(np.mean(x))), x.shape)
    b_grid = ev.drift(deposit(x, grid) / grid.dx)
    return np.interp(x, grid.x, b_grid)


def simulate_mckean_vlasov(spec: ModelSpec, policy: BangBangPolicy, mu0: Measure,
                           n_particles: int, seed: int, common_noise_rho: float = 0.0,
                           grid: Grid | None = None, threads: int = 1,
                           snapshots=(0, -1), recenter_policy: bool = False,
                           common_shocks: bool = True, x0: np.ndarray | None = None,
                           observe=None) -> ParticleRun:
    """Euler-Maruyama particle system for the McKean-Vlasov dynamics.

    Each step moves particle i by ``(b(x_i, mu_hat) + phi(t, x_i)) dt +
    sigma (rho dW0 + sqrt(1 - rho^2) dW^i)`` and reflects at the walls.  With
    ``recenter_policy`` the policy is read at ``x - (m_hat_t - m_hat_0)`` (a
    policy expressed relative to the population mean).  ``common_shocks=False``
    zeroes dW0 while keeping the idiosyncratic scale, which gives the
    conditional law given W0 = 0.  ``observe(n, x)`` is called with the
    positions at every time node.
    """
    if n_particles < 2:
        raise ModelError("need at least 2 particles")
    if not 0.0 <= common_noise_rho <= 1.0:
        raise ModelError("common-noise correlation must lie in [0, 1]")
    grid = grid or policy.grid
    if policy.action.shape != (grid.nt, grid.nx):
        raise ModelError("policy is defined on a different grid")
    ev = None if spec.drift_of_mean is not None else CoefficientEvaluator(spec, grid)
    rho = float(common_noise_rho)
    s_idio = spec.sigma * np.sqrt(1.0 - rho * rho)
    s_common = spec.sigma * rho
    dt = grid.dt
    sq = np.sqrt(dt)
    x = sample_measure(mu0, n_particles, seed) if x0 is None else np.array(x0, dtype=float)
    if x.size != n_particles:
        raise ModelError("x0 must have n_particles entries")
    x = np.clip(x, grid.x_lo, grid.x_hi)
    snaps = {s % grid.nt for s in snapshots}
    offsets = np.arange(n_particles)
    dens = np.empty((grid.nt, grid.nx))
    means = np.empty(grid.nt)
    dw0 = np.zeros(grid.nt - 1)
    ensembles = []
    m_ref = float(np.mean(x))
    for n in range(grid.nt):
        dens[n] = deposit(x, grid) / grid.dx
        means[n] = float(np.mean(x))
        if observe is not None:
            observe(n, x)
        if n in snaps:
            ensembles.append(ParticleEnsemble(x.copy(), n, seed, offsets))
        if n == grid.nt - 1:
            break
        look = x - (means[n] - m_ref) if recenter_policy else x
        drift = particle_drift(spec, ev, grid, x) + policy.at(n, look)
        dw = rng.normals(seed, rng.IDIOSYNCRATIC, n, n_particles, threads=threads)
        step = drift * dt + s_idio * sq * dw
        if s_common > 0 and common_shocks:
            z0 = float(rng.normals(seed, rng.COMMON, n, 1)[0])
            dw0[n] = sq * z0
            step = step + s_common * dw0[n]
        x = reflect(x + step, grid.x_lo, grid.x_hi)
    flow = MeasureFlow(dens, grid)
    return ParticleRun(flow, ensembles, means, dw0)


# ---------------------------------------------------------------- cross checks


@dataclass
class CrossCheck:
    per_time: np.ndarray
    max: float
    grid_flow: MeasureFlow
    particle_flow: MeasureFlow


def cross_check_forward(spec: ModelSpec, policy: BangBangPolicy, mu0: Measure, grid: Grid,
                        n_particles: int, seed: int, threads: int = 1) -> CrossCheck:
    """``D^1`` between the grid and particle flows at every time node."""
    fp = solve_fokker_planck(spec, policy, mu0, grid)
    run = simulate_mckean_vlasov(spec, policy, mu0, n_particles, seed, grid=grid, threads=threads)
    d = flow_distance(fp, run.flow)
    return CrossCheck(d, float(d.max()), fp, run.flow)


@dataclass
class CouplingEstimate:
    d1_hat: float
    distances: np.ndarray  # D^1(mu(phi)_t, mu(phi~)_t)
    control_gap: np.ndarray  # int_0^t E|phi(x_s) - phi~(x~_s)| ds


def coupling_constant(spec: ModelSpec, policy_a: BangBangPolicy, policy_b: BangBangPolicy,
                      mu0: Measure, n_particles: int, seed: int, floor: float = 1e-3) -> CouplingEstimate:
    """Smallest ``d1`` with ``D^1(mu_t, mu~_t) <= d1 * int_0^t E|phi - phi~| ds`` on sampled t.

    Both systems share the seed, so particle i of each sees the same noise.
    """
    grid = policy_a.grid
    ev = None if spec.drift_of_mean is not None else CoefficientEvaluator(spec, grid)
    x = sample_measure(mu0, n_particles, seed)
    y = x.copy()
    dt, sq = grid.dt, np.sqrt(grid.dt)
    gap = np.zeros(grid.nt)
    wa = np.empty((grid.nt, grid.nx))
    wb = np.empty((grid.nt, grid.nx))
    for n in range(grid.nt):
        wa[n] = deposit(x, grid)
        wb[n] = deposit(y, grid)
        if n == grid.nt - 1:
            break
        pa, pb = policy_a.at(n, x), policy_b.at(n, y)
        gap[n + 1] = gap[n] + dt * float(np.mean(np.abs(pa - pb)))
        dw = spec.sigma * sq * rng.normals(seed, rng.IDIOSYNCRATIC, n, n_particles)
        x = reflect(x + (particle_drift(spec, ev, grid, x) + pa) * dt + dw, grid.x_lo, grid.x_hi)
        y = reflect(y + (particle_drift(spec, ev, grid, y) + pb) * dt + dw, grid.x_lo, grid.x_hi)
    dist = flow_distance(MeasureFlow(wa / grid.dx, grid), MeasureFlow(wb / grid.dx, grid))
    ok = gap > floor
    d1 = float(np.max(dist[ok] / gap[ok])) if np.any(ok) else 0.0
    return CouplingEstimate(d1, dist, gap)
