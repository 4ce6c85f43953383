"""Picard iteration to the mean field equilibrium, and the two forward solvers.

Starts from an initial law off the target so the flow has something to do,
then checks the grid Fokker-Planck flow against a particle simulation.
"""
# %%
from bvmfg.fixed_point import solve_mfg
from bvmfg.forward import cross_check_forward
from bvmfg.measures import Measure, holder_check
from bvmfg.model import SYSTEMIC_FIXTURE, build_model, check_assumptions, make_grid

spec = build_model(dict(SYSTEMIC_FIXTURE, family="systemic_risk"))
grid = make_grid(spec, 121)
print(check_assumptions(spec, grid))
mu0 = Measure.gaussian(grid, 0.8, 0.25)

# %%
sol, report = solve_mfg(spec, mu0, grid, tol=1e-4,
                        callback=lambda k, d: print(f"  iteration {k}: sup_t D1 = {d:.3e}"))
print("converged:", sol.converged, " contraction estimate:", round(report.estimated_contraction, 3))
print("self-consistency:", sol.consistency)
print("Hölder check (beta = 1/2):", holder_check(sol.flow, 0.5))

# %% mean and spread of the equilibrium flow
means, var = sol.flow.means(), sol.flow.variances()
for n in range(0, grid.nt, grid.nt // 5):
    print(f"t = {grid.t[n]:.2f}  mean = {means[n]:+.4f}  var = {var[n]:.4f}  "
          f"band = [{sol.policy.lower_boundary[n]:+.3f}, {sol.policy.upper_boundary[n]:+.3f}]")

# %% grid vs particles under the equilibrium policy
cc = cross_check_forward(spec, sol.policy, mu0, grid, n_particles=100_000, seed=1)
print("max_t D1(grid, particles) =", round(cc.max, 4))
