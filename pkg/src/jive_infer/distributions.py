"""Survival functions of the reference laws used for p-values.

``weighted_chisq_sf`` inverts the characteristic function of
``sum_i w_i Z_i^2`` with Imhof's formula

    P(Q > t) = 1/2 + (1/pi) * int_0^inf sin(theta(u)) / (u rho(u)) du,
    theta(u) = 1/2 sum_i atan(w_i u) - t u / 2,
    rho(u)   = prod_i (1 + w_i^2 u^2)^(1/4).

The integral is split at ``u0``: QAGS on ``[0, u0]`` and QAWF (Fourier
integral to infinity) on the tail, after writing
``sin(phi - t u/2) = sin(phi) cos(t u/2) - cos(phi) sin(t u/2)``. No
truncation of the infinite range is needed, which matters for one or two
weights where the integrand decays only like ``u^(-3/2)`` or ``u^(-2)``.

As ``t -> 0`` the Fourier weight ``cos(t u / 2)`` stops oscillating and the
tail routine loses accuracy. For ``t <= min(w)`` the lower tail is taken
from the series in chi-square laws with increasing degrees of freedom
instead; its coefficients are nonnegative and sum to one, which gives a
rigorous truncation bound.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from . import _core
from .errors import PrecisionError, UsageError

SF_ATOL = 1e-8


@dataclass(frozen=True)
class ChiBarSpec:
    """Nonnegative weights of a weighted sum of independent chi-square(1) variates."""

    weights: tuple[float, ...]

    def __init__(self, weights):
        w = tuple(float(x) for x in np.atleast_1d(np.asarray(weights, dtype=float)))
        if any(not math.isfinite(x) for x in w):
            raise UsageError("chi-bar weights must be finite")
        if any(x < 0 for x in w):
            raise UsageError(f"chi-bar weights must be nonnegative, got {w}")
        if not any(x > 0 for x in w):
            raise UsageError("chi-bar law needs at least one positive weight")
        object.__setattr__(self, "weights", w)

    @property
    def positive(self) -> tuple[float, ...]:
        return tuple(x for x in self.weights if x > 0)


def chisq_sf(df: int, t: float) -> float:
    """Upper tail of chi-square(df) via the regularized incomplete gamma."""
    if df < 1:
        raise UsageError(f"df must be >= 1, got {df}")
    if t <= 0:
        return 1.0
    return float(special.gammaincc(0.5 * df, 0.5 * t))


def normal_sf(t: float) -> float:
    return 0.5 * math.erfc(t / math.sqrt(2.0))


def _quad(func, a, b, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        val, err = integrate.quad(func, a, b, **kw)[:2]
    return val, err


def imhof_sf(weights, t: float, atol: float = SF_ATOL, backend: str | None = None) -> float:
    """Imhof inversion for strictly positive ``weights`` (no shortcuts)."""
    w = [float(x) for x in weights]
    if t <= 0:
        return 1.0
    fns = _core.ImhofFunctions(t, w, backend=backend)
    # a few oscillation periods (4 pi / t) before switching to the Fourier
    # routine, but no further than the amplitude scale when t << weights
    u0 = min(16.0 * math.pi / t, 64.0 / min(w))
    # the probability error is the integral error divided by pi
    eps = 0.25 * atol * math.pi
    head, e1 = _quad(fns.integrand, 0.0, u0, epsabs=eps, epsrel=0.0, limit=500)
    omega = 0.5 * t
    tail_c, e2 = _quad(fns.amp_sin, u0, np.inf, weight="cos", wvar=omega,
                       epsabs=eps, limlst=200, limit=500)
    tail_s, e3 = _quad(fns.amp_cos, u0, np.inf, weight="sin", wvar=omega,
                       epsabs=eps, limlst=200, limit=500)
    achieved = (e1 + e2 + e3) / math.pi
    if not math.isfinite(achieved) or achieved > atol:
        raise PrecisionError(
            f"Imhof quadrature reached only {achieved:.3g} (target {atol:.1g})",
            achieved=achieved,
        )
    p = 0.5 + (head + tail_c - tail_s) / math.pi
    return min(1.0, max(0.0, p))


SERIES_MAX_TERMS = 500


def lower_series_sf(weights, t: float, atol: float = SF_ATOL) -> float:
    """``1 - P(Q <= t)`` from the expansion
    ``P(Q <= t) = sum_j c_j P(chi2_{m + 2j} <= t / b)`` with ``b = min(w)``.

    ``c_0 = prod sqrt(b / w_i)`` and ``c_j = (1/j) sum_{r<j} h_{j-r} c_r`` with
    ``h_l = 1/2 sum_i (1 - b / w_i)^l``. The truncation error after ``J``
    terms is at most ``(1 - sum_{j<J} c_j) P(chi2_{m + 2J} <= t / b)``.
    """
    w = np.asarray(weights, dtype=float)
    m = w.size
    if t <= 0:
        return 1.0
    b = float(w.min())
    gam = 1.0 - b / w
    x = 0.5 * t / b
    c = [float(np.prod(np.sqrt(b / w)))]
    h = [0.0]
    powers = np.ones_like(gam)
    cdf, mass = 0.0, 0.0
    for j in range(SERIES_MAX_TERMS):
        if j > 0:
            powers = powers * gam
            h.append(0.5 * float(powers.sum()))
            c.append(sum(h[j - r] * c[r] for r in range(j)) / j)
        F = float(special.gammainc(0.5 * m + j, x))
        cdf += c[j] * F
        mass += c[j]
        if max(1.0 - mass, 0.0) * F <= 0.1 * atol or F == 0.0:
            return min(1.0, max(0.0, 1.0 - cdf))
    raise PrecisionError(
        f"lower-tail series did not reach {atol:.1g} in {SERIES_MAX_TERMS} terms",
        achieved=max(1.0 - mass, 0.0) * F,
    )


def weighted_chisq_sf(spec: ChiBarSpec | np.ndarray | list, t: float,
                      atol: float = SF_ATOL) -> float:
    """P(sum_i w_i Z_i^2 > t) for independent standard normal ``Z_i``.

    Zero weights are dropped. With a single positive weight the law is a
    scaled chi-square(1) and the closed form is used. Thresholds at or below
    the smallest weight use :func:`lower_series_sf`, all others Imhof.
    """
    if not isinstance(spec, ChiBarSpec):
        spec = ChiBarSpec(spec)
    if not math.isfinite(t):
        raise UsageError(f"threshold must be finite, got {t}")
    w = spec.positive
    if t <= 0:
        return 1.0
    if len(w) == 1:
        return chisq_sf(1, t / w[0])
    if t <= min(w):
        return lower_series_sf(w, t, atol=atol)
    return imhof_sf(w, t, atol=atol)
