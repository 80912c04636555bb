"""Pure-Python/numpy versions of the compiled kernels in ``_ext.pyx``."""

import math

import numpy as np


def jackknife_c(P, lam):
    C = P * (1.0 + 0.5 * (lam[:, None] + lam[None, :]))
    np.fill_diagonal(C, 0.0)
    return C


def crossfit_weights(C, B, tol):
    b = np.diag(B)
    den = np.outer(b, b) + B * B
    small = np.abs(den) < tol
    bad = int(np.count_nonzero(small & (C != 0.0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        M = np.where(small, 0.0, C * C / np.where(small, 1.0, den))
    return M, bad


def hadamard_square(C):
    return C * C


def _theta_rho(u, w):
    theta = 0.0
    logrho = 0.0
    for wi in w:
        wu = wi * u
        theta += math.atan(wu)
        logrho += math.log1p(wu * wu)
    return 0.5 * theta, 0.25 * logrho


def imhof_integrand(u, t, w):
    if u == 0.0:
        return 0.5 * (math.fsum(w) - t)
    theta, logrho = _theta_rho(u, w)
    return math.sin(theta - 0.5 * t * u) / (u * math.exp(logrho))


def imhof_amp_sin(u, t, w):
    theta, logrho = _theta_rho(u, w)
    return math.sin(theta) / (u * math.exp(logrho))


def imhof_amp_cos(u, t, w):
    theta, logrho = _theta_rho(u, w)
    return math.cos(theta) / (u * math.exp(logrho))
