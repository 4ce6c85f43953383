"""How far is the mean field policy from a Nash equilibrium of the N-player game?

For each N the gain one player can get by deviating (epsilon_hat) and the
gap between N-player and mean-field paths under shared noise are estimated;
both are fitted against N on a log-log scale.
"""
# %%
import numpy as np

from bvmfg.fixed_point import solve_mfg
from bvmfg.measures import Measure
from bvmfg.model import SYSTEMIC_FIXTURE, build_model, make_grid
from bvmfg.nplayer import coupling_gap, nash_gap, scaling_fit

spec = build_model(dict(SYSTEMIC_FIXTURE, family="systemic_risk"))
grid = make_grid(spec, 121)
mu0 = Measure.gaussian(grid, 0.0, 0.25)
sol, _ = solve_mfg(spec, mu0, grid)

# %%
Ns = [8, 16, 32, 64, 128, 256]
reps = 256
eps, gaps = [], []
for N in Ns:
    est = nash_gap(spec, sol, N, reps, seed=7)
    cg = coupling_gap(spec, sol.policy, sol.flow, N, reps, seed=7, x0=mu0)
    eps.append(est.epsilon_hat)
    gaps.append(cg.mean_sq)
    print(f"N = {N:4d}  epsilon_hat = {est.epsilon_hat:.2e} +- {est.std_error:.1e} "
          f"({est.deviation_descriptor:16s})  E sup|gap|^2 = {cg.mean_sq:.2e}")

# %% the coupling gap follows 1/N closely; epsilon_hat is small and noisy
print("coupling gap slope:", round(scaling_fit(Ns, gaps).slope, 3))
if np.all(np.array(eps) > 0):
    print("epsilon_hat slope :", round(scaling_fit(Ns, eps).slope, 3))
else:
    print("epsilon_hat hit 0 (deviation gain below noise) at N =", [n for n, e in zip(Ns, eps) if e == 0])
