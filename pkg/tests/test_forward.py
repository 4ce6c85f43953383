import numpy as np
import pytest

from bvmfg.forward import (boundary_mass, coupling_constant, cross_check_forward, reflect,
                           sample_measure, simulate_mckean_vlasov, solve_fokker_planck)
from bvmfg.hjb import BangBangPolicy
from bvmfg.measures import Measure, MeasureFlow, wasserstein
from bvmfg.model import ModelError, build_model, make_grid


@pytest.fixture(scope="module")
def zero_setup():
    spec = build_model({"family": "zero", "sigma": 0.5, "x_lo": -4.0, "x_hi": 4.0})
    grid = make_grid(spec, 161)
    return spec, grid, BangBangPolicy.constant(grid, spec.theta)


def test_fokker_planck_conserves_mass_and_symmetry(systemic_spec, grid121, mu0, mfg_solution):
    pol = mfg_solution[0].policy
    flow, diag = solve_fokker_planck(systemic_spec, pol, mu0, grid121, diagnostics=True)
    assert np.max(np.abs(flow.weights.sum(axis=1) - 1)) < 1e-12
    assert diag.mass_error.max() < 1e-12 and diag.clipped_mass == 0.0
    # symmetric data and a mirror-symmetric policy keep the density mirror-symmetric
    assert np.max(np.abs(flow.densities - flow.densities[:, ::-1])) < 1e-9
    assert np.max(np.abs(flow.means())) < 1e-9
    assert boundary_mass(flow) < 1e-6


def test_pure_diffusion_variance_grows_linearly(zero_setup):
    spec, grid, pol = zero_setup
    mu = Measure.gaussian(grid, 0.0, 0.1)
    flow = solve_fokker_planck(spec, pol, mu, grid)
    expected = mu.variance() + spec.sigma**2 * grid.t
    assert np.allclose(flow.variances(), expected, rtol=0.02)
    assert np.allclose(flow.means(), 0.0, atol=1e-12)


def test_particles_brownian_variance(zero_setup):
    spec, grid, pol = zero_setup
    x0 = np.zeros(200_000)
    run = simulate_mckean_vlasov(spec, pol, Measure.point_mass(grid, 0.0), x0.size, 3, grid=grid, x0=x0)
    var_T = np.var(run.ensembles[-1].positions)
    assert var_T == pytest.approx(spec.sigma**2 * spec.horizon, rel=0.02)


def test_full_common_noise_keeps_cross_sectional_spread(zero_setup):
    spec, grid, pol = zero_setup
    mu = Measure.gaussian(grid, 0.0, 0.2)
    run = simulate_mckean_vlasov(spec, pol, mu, 50_000, 4, common_noise_rho=1.0, grid=grid)
    first, last = run.ensembles[0].positions, run.ensembles[-1].positions
    # every particle receives the same shock; the spread is unchanged away from the walls
    assert np.std(last) == pytest.approx(np.std(first), rel=1e-3)
    assert run.means[-1] - run.means[0] == pytest.approx(spec.sigma * run.common_increments.sum(), abs=1e-3)


def test_particle_runs_are_thread_count_independent(systemic_spec, grid121, mu0, mfg_solution):
    pol = mfg_solution[0].policy
    a = simulate_mckean_vlasov(systemic_spec, pol, mu0, 70_000, 11, grid=grid121, threads=1)
    b = simulate_mckean_vlasov(systemic_spec, pol, mu0, 70_000, 11, grid=grid121, threads=4)
    assert np.array_equal(a.flow.densities, b.flow.densities)
    assert np.array_equal(a.ensembles[-1].positions, b.ensembles[-1].positions)


def test_zero_model_grid_and_particles_agree(zero_setup):
    spec, grid, pol = zero_setup
    mu = Measure.gaussian(grid, 0.3, 0.2)
    cc = cross_check_forward(spec, pol, mu, grid, 100_000, 5)
    # Monte Carlo D1 at 1e5 particles is a few 1e-3; numerical diffusion adds O(dx^2)
    assert cc.max < 0.01


def test_vanishing_diffusion_transports_at_control_speed():
    spec = build_model({"family": "zero", "sigma": 1e-3, "theta": 1.0, "x_lo": -2.0, "x_hi": 2.0})
    grid = make_grid(spec, 81)
    pol = BangBangPolicy.constant(grid, 1.0, 1.0)
    mu = Measure.point_mass(grid, -1.0)
    flow = solve_fokker_planck(spec, pol, mu, grid)
    assert abs(flow.means()[-1] - 0.0) <= 2 * grid.dx
    run = simulate_mckean_vlasov(spec, pol, mu, 1000, 1, grid=grid, x0=np.full(1000, -1.0))
    assert np.all(np.abs(run.ensembles[-1].positions - 0.0) <= 2 * grid.dx)


def test_reflection_and_sampling(grid121, mu0):
    x = reflect(np.array([-3.5, 0.0, 3.2, 10.0]), -3.0, 3.0)
    assert np.allclose(x[:3], [-2.5, 0.0, 2.8]) and -3 <= x[3] <= 3
    s = sample_measure(mu0, 200_000, 1)
    assert np.mean(s) == pytest.approx(0.0, abs=5e-3)
    assert np.var(s) == pytest.approx(mu0.variance() + grid121.dx**2 / 12, rel=0.02)


def test_coupling_constant_is_stable_across_seeds(systemic_spec, grid121, mu0):
    a = BangBangPolicy.from_thresholds(grid121, 1.0, -0.5, 0.5)
    b = BangBangPolicy.from_thresholds(grid121, 1.0, -0.2, 0.2)
    est = [coupling_constant(systemic_spec, a, b, mu0, 40_000, s).d1_hat for s in (1, 2, 3)]
    assert all(0 < e < 5 for e in est)
    assert max(est) / min(est) < 1.5
    same = coupling_constant(systemic_spec, a, a, mu0, 10_000, 1)
    assert same.d1_hat == 0.0 and np.all(same.distances == 0)


def test_forward_input_checks(systemic_spec, grid121, mu0):
    other = make_grid(systemic_spec, 61)
    with pytest.raises(ModelError):
        solve_fokker_planck(systemic_spec, BangBangPolicy.constant(other, 1.0), mu0, grid121)
    pol = BangBangPolicy.constant(grid121, 1.0)
    with pytest.raises(ModelError):
        simulate_mckean_vlasov(systemic_spec, pol, mu0, 1, 0)
    with pytest.raises(ModelError):
        simulate_mckean_vlasov(systemic_spec, pol, mu0, 10, 0, common_noise_rho=1.5)
