"""Parabolic cylinder functions of negative order by direct quadrature.

    D_a(x) = exp(-x^2/4) / Gamma(-a) * int_0^inf t^(-a-1) exp(-t^2/2 - x t) dt,   a < 0
"""
from __future__ import annotations

import logging
import math

import numpy as np
from scipy import integrate, optimize

log = logging.getLogger(__name__)

TAIL_RATIO = 1e-18


class QuadratureError(ArithmeticError):
    pass


def _log_integrand(t, nu, x):
    return nu * math.log(t) - 0.5 * t * t - x * t


def _cutoff(nu: float, x: float) -> float:
    """Point past the peak where the integrand has fallen below TAIL_RATIO of its peak."""
    if nu > 0:
        peak = 0.5 * (-x + math.sqrt(x * x + 4 * nu))
    else:
        peak = max(-x, 0.0) + 1e-3
    peak = max(peak, 1e-3)
    ref = _log_integrand(peak, nu, x)
    target = ref + math.log(TAIL_RATIO)
    hi = peak + 1.0
    while _log_integrand(hi, nu, x) > target:
        hi = peak + 2 * (hi - peak)
    return optimize.brentq(lambda t: _log_integrand(t, nu, x) - target, peak, hi, xtol=1e-12)


def _one(alpha: float, x: float, rtol: float) -> float:
    nu = -alpha - 1.0
    tmax = _cutoff(nu, x)
    # t^nu carried by the algebraic weight; valid for nu > -1
    val, err = integrate.quad(lambda t: math.exp(-0.5 * t * t - x * t), 0.0, tmax,
                              weight="alg", wvar=(nu, 0.0), epsabs=0.0, epsrel=rtol, limit=200)
    if not np.isfinite(val) or err > max(100 * rtol * abs(val), 1e-300):
        raise QuadratureError(f"quadrature failed for D_{alpha}({x}): estimate {val}, error {err}")
    g_end = math.exp(_log_integrand(tmax, nu, x))
    slope = tmax + x - nu / tmax
    tail = g_end / slope if slope > 0 else math.inf
    log.debug("D_%g(%g): cut at t=%.3f, tail bound %.2e (rel %.2e)", alpha, x, tmax, tail,
              tail / abs(val) if val else math.inf)
    return math.exp(-0.25 * x * x) * val / math.gamma(-alpha)


def parabolic_cylinder(alpha: float, x, rtol: float = 1e-10):
    """``D_alpha(x)`` for ``alpha < 0``; ``x`` may be scalar or array."""
    if not alpha < 0:
        raise ValueError(f"integral representation needs alpha < 0, got {alpha}")
    if np.ndim(x) == 0:
        return _one(float(alpha), float(x), rtol)
    xs = np.asarray(x, dtype=float)
    return np.array([_one(float(alpha), float(v), rtol) for v in xs.ravel()]).reshape(xs.shape)
