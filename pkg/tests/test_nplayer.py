import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bvmfg.fixed_point import solve_mfg
from bvmfg.hjb import BangBangPolicy, solve_hjb
from bvmfg.measures import Measure, MeasureFlow
from bvmfg.model import ModelError, ModelSpec, build_model, make_grid
from bvmfg.nplayer import (coupling_gap, deviator_gap, finite_player_spec, nash_gap, perturbed_policies,
                           scaling_fit, simulate_nplayer)

from .test_hjb import closed_form_theta0


def _const(c):
    return lambda x, y: np.full(np.broadcast(x, y).shape, float(c))


def test_unit_running_cost_accumulates_horizon():
    spec = ModelSpec(b0=_const(0.0), f0=_const(1.0), g1=lambda x: np.ones_like(x), g2=lambda x: np.ones_like(x),
                     sigma=0.3, theta=1.0, horizon=1.5, domain=(-2, 2))
    grid = make_grid(spec, 41)
    run = simulate_nplayer(spec, BangBangPolicy.constant(grid, 1.0), 5, 3, 0)
    assert np.allclose(run.costs, 1.5, atol=1e-12)
    assert run.trajectories.shape == (grid.nt, 5)


def test_control_cost_charged_at_rate():
    spec = build_model({"family": "zero", "g1": 0.4, "g2": 0.7, "sigma": 0.1, "x_lo": -5, "x_hi": 5})
    grid = make_grid(spec, 51)
    up = simulate_nplayer(spec, BangBangPolicy.constant(grid, 1.0, 1.0), 3, 2, 0)
    down = simulate_nplayer(spec, BangBangPolicy.constant(grid, 1.0, -1.0), 3, 2, 0)
    assert np.allclose(up.costs, 0.4) and np.allclose(down.costs, 0.7)


def test_relabelling_players_permutes_outputs(systemic_spec, mfg_solution, mu0):
    pol = mfg_solution[0].policy
    order = np.array([3, 0, 4, 1, 2])
    a = simulate_nplayer(systemic_spec, pol, 5, 4, 9, x0=mu0)
    b = simulate_nplayer(systemic_spec, pol, 5, 4, 9, x0=mu0, order=order)
    assert np.allclose(b.costs, a.costs[:, order], atol=1e-12)


def test_deterministic_and_thread_independent(systemic_spec, mfg_solution, mu0):
    pol = mfg_solution[0].policy
    a = simulate_nplayer(systemic_spec, pol, 16, 3, 2, x0=mu0)
    b = simulate_nplayer(systemic_spec, pol, 16, 3, 2, x0=mu0, threads=4)
    assert np.array_equal(a.costs, b.costs)


def test_coupling_gap_vanishes_without_interaction():
    spec = build_model({"family": "decoupled", "a": 1, "eps": 1, "c": 1, "r": 0.1, "sigma": 0.5,
                        "theta": 1, "T": 1, "target": 0.0})
    grid = make_grid(spec, 61)
    mu0 = Measure.gaussian(grid, 0.0, 0.25)
    sol, _ = solve_mfg(spec, mu0, grid)
    gap = coupling_gap(spec, sol.policy, sol.flow, 10, 4, 1, x0=mu0)
    assert gap.worst <= 1e-12
    with pytest.raises(ModelError):
        coupling_gap(spec, sol.policy, None, 10, 4, 1)


def test_coupling_gap_shrinks_with_n(systemic_spec, mfg_solution, mu0):
    sol = mfg_solution[0]
    g = [coupling_gap(systemic_spec, sol.policy, sol.flow, N, 32, 5, x0=mu0).mean_sq for N in (8, 32, 128)]
    assert g[0] > g[1] > g[2]


def test_deviator_gap_slope(systemic_spec, mfg_solution, mu0):
    sol = mfg_solution[0]
    dev = BangBangPolicy.constant(sol.policy.grid, 1.0, 1.0)
    Ns = [8, 16, 32, 64, 128]
    sups = [deviator_gap(systemic_spec, sol.policy, dev, sol.flow, N, 32, 3, x0=mu0).worst for N in Ns]
    assert scaling_fit(Ns, sups).slope <= -0.3


def test_decoupled_game_is_a_nash_equilibrium():
    spec = build_model({"family": "decoupled", "a": 1, "eps": 1, "c": 1, "r": 0.1, "sigma": 0.5,
                        "theta": 1, "T": 1, "target": 0.0})
    grid = make_grid(spec, 61)
    mu0 = Measure.gaussian(grid, 0.0, 0.25)
    sol, _ = solve_mfg(spec, mu0, grid)
    est = nash_gap(spec, sol, 16, 64, 4)
    assert est.epsilon_hat <= 2 * est.std_error + 1e-15
    # the best response to the flow is the equilibrium policy itself
    assert est.gains["best-response"] == (0.0, 0.0)


def test_nash_gap_nonnegative_and_empty_budget(systemic_spec, mfg_solution):
    sol = mfg_solution[0]
    est = nash_gap(systemic_spec, sol, 8, 16, 1)
    assert est.epsilon_hat >= 0
    assert set(est.gains) >= {"best-response", "best-response-N", "widen:0.05"}
    none = nash_gap(systemic_spec, sol, 8, 16, 1, deviation_budget=0, best_response=False)
    assert (none.epsilon_hat, none.std_error, none.deviation_descriptor) == (0.0, 0.0, "none")


def test_nash_gap_deviator_relabelling(systemic_spec, mfg_solution):
    sol = mfg_solution[0]
    a = nash_gap(systemic_spec, sol, 8, 64, 2, deviator=0)
    b = nash_gap(systemic_spec, sol, 8, 64, 2, deviator=5)
    assert abs(a.epsilon_hat - b.epsilon_hat) <= 3 * math.hypot(a.std_error, b.std_error) + 1e-12


def test_nash_gap_rejects_unconverged(systemic_spec, grid121):
    sol, _ = solve_mfg(systemic_spec, Measure.gaussian(grid121, 1.0, 0.25), grid121, tol=1e-12, max_iter=1)
    with pytest.raises(ModelError, match="converge"):
        nash_gap(systemic_spec, sol, 8, 4, 0)


def test_finite_player_spec_weights_own_state(systemic_spec):
    own = finite_player_spec(systemic_spec, 4)
    x = np.array([1.0])
    # b = a(m_N - x) with m_N = x/4 + 3m/4
    assert own.drift_of_mean(x, 0.0)[0] == pytest.approx(-0.75)
    kern = finite_player_spec(systemic_spec.replace(drift_of_mean=None, cost_of_mean=None), 4)
    assert kern.b0(np.array(1.0), np.array(0.0)) == pytest.approx(-0.75)


def test_perturbations_cycle_and_stay_ordered(grid121):
    pol = BangBangPolicy.from_thresholds(grid121, 1.0, -0.1, 0.1)
    pert = perturbed_policies(pol, 9)
    assert [n for n, _ in pert][:5] == ["widen:0.05", "narrow:0.05", "shift-up:0.05", "shift-down:0.05", "widen:0.1"]
    for _, p in pert:
        assert np.all(p.lower_boundary <= p.upper_boundary)
        assert p.rational


def test_input_validation(systemic_spec, mfg_solution):
    pol = mfg_solution[0].policy
    with pytest.raises(ModelError):
        simulate_nplayer(systemic_spec, pol, 1, 1, 0)
    with pytest.raises(ModelError):
        simulate_nplayer(systemic_spec, pol, 4, 0, 0)
    with pytest.raises(ModelError):
        simulate_nplayer(systemic_spec, [pol, pol], 4, 1, 0)
    with pytest.raises(ModelError):
        simulate_nplayer(systemic_spec, pol, 4, 1, 0, x0=np.zeros(3))


@pytest.mark.parametrize("power, slope", [(1.0, -1.0), (0.5, -0.5)])
def test_scaling_fit_exact_power_laws(power, slope):
    Ns = [8, 16, 32, 64, 128, 256]
    fit = scaling_fit(Ns, [3.0 / N**power for N in Ns])
    assert fit.slope == pytest.approx(slope, abs=1e-12)
    assert fit.r2 == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_scaling_fit_noisy_battery(seed):
    rng = np.random.default_rng(seed)
    Ns = np.array([8, 16, 32, 64, 128, 256])
    vals = 0.1 / np.sqrt(Ns) * np.exp(0.1 * rng.standard_normal(Ns.size))
    assert abs(scaling_fit(Ns, vals).slope + 0.5) <= 0.15


def test_scaling_fit_errors_and_degenerate():
    with pytest.raises(ValueError):
        scaling_fit([8, 16], [1, 2])
    with pytest.raises(ValueError):
        scaling_fit([8, 16, 32], [1, 0, 2])
    assert scaling_fit([8, 16, 32], [0, 0, 0]).degenerate


@pytest.mark.slow
def test_large_game_cost_matches_fine_grid_value(systemic_spec, mu0):
    # theta = 0: the value is known in closed form; compare the pooled N-player cost from x0 = 0
    spec = systemic_spec.replace(theta=0.0)
    grid = make_grid(spec, 121)
    pol = BangBangPolicy.constant(grid, 0.0)
    run = simulate_nplayer(spec, pol, 256, 16, 3, x0=0.0)
    mean, se = run.pooled_cost
    exact = closed_form_theta0(0.0, 0.0)
    # empirical-mean fluctuation adds O(1/N); the Euler bias is O(dt)
    assert abs(mean - exact) <= 3 * se + 2e-3
