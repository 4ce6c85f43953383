"""Free boundary of the interbank lending example.

Solves the control problem with the population mean frozen at m0, reads off
the inaction band [m - h, m + h] and compares the value inside the band with
its closed-form quadratic part.
"""
# %%
import numpy as np

from bvmfg.systemic import (SystemicRiskParams, coefficients, inner_remainder, smooth_pasting,
                            solve_systemic_hjb, symmetric_grid, value_asymmetry)

params = SystemicRiskParams(a=1.0, eps=1.0, c=1.0, r=0.1, sigma=0.5, theta=1.0)
grid = symmetric_grid(params, nx=241)
value, fb = solve_systemic_hjb(params, grid)

# %% band half-width over time: narrows towards the horizon as the terminal penalty dominates
for s in (0.0, 0.25, 0.5, 0.75, 0.9, 1.0):
    n = int(round(s / grid.dt))
    print(f"s = {grid.t[n]:.3f}   h = {fb.h[n]:.4f}   x1 = {fb.x1[n]:+.4f}   x2 = {fb.x2[n]:+.4f}")

# %% symmetry and smoothness
print("value asymmetry about m:", value_asymmetry(value))
print("boundary asymmetry     :", np.nanmax(np.abs(fb.asymmetry)))
print("smooth-pasting jump / interior variation:", round(smooth_pasting(value, fb).ratio, 2))

# %% inside the band v = eta1 (m - x)^2 + eta3 + w, with w even in (m - x)
w, asym = inner_remainder(value, fb, params)
cs = coefficients(params)
print("eta1(0), eta3(0):", float(cs.eta1(0.0)), float(cs.eta3(0.0)))
print("remainder at m, s = 0:", w[0, grid.nx // 2], "  remainder asymmetry:", asym)

# %% a dearer control widens the band
for r in (0.05, 0.1, 0.2, 0.4):
    _, f = solve_systemic_hjb(params.replace(r=r), grid)
    print(f"r = {r:<5} h(0) = {f.h[0]:.4f}")
