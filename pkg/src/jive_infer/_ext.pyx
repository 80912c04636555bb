# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Elementwise n x n constructions that would otherwise allocate several
temporaries in numpy, and the Imhof integrands evaluated by scipy's QUADPACK
through ``LowLevelCallable`` (no Python frame per evaluation).

The integrands read their parameters from a packed double buffer
``[t, m, w_1, ..., w_m]`` passed as ``user_data``.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport atan, cos, exp, log1p, sin

cnp.import_array()


def jackknife_c(const double[:, ::1] P, const double[::1] lam):
    """C = P - L + (P L + L P) / 2 with L = diag(lam); diagonal set to zero."""
    cdef Py_ssize_t n = P.shape[0], i, j
    out = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] C = out
    cdef double li
    for i in range(n):
        li = lam[i]
        for j in range(n):
            C[i, j] = P[i, j] * (1.0 + 0.5 * (li + lam[j]))
        C[i, i] = 0.0
    return out


def crossfit_weights(const double[:, ::1] C, const double[:, ::1] B, double tol):
    """M = C**2 / (b b' + B**2) elementwise, b = diag(B).

    Returns ``(M, bad)`` where ``bad`` is the number of denominators whose
    magnitude fell below ``tol`` (those entries are left at zero).
    """
    cdef Py_ssize_t n = C.shape[0], i, j
    out = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] M = out
    cdef double bi, den, c
    cdef Py_ssize_t bad = 0
    for i in range(n):
        bi = B[i, i]
        for j in range(n):
            den = bi * B[j, j] + B[i, j] * B[i, j]
            c = C[i, j]
            if den < tol and den > -tol:
                if c != 0.0:
                    bad += 1
                M[i, j] = 0.0
            else:
                M[i, j] = c * c / den
    return out, bad


def hadamard_square(const double[:, ::1] C):
    cdef Py_ssize_t n = C.shape[0], m = C.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] S = out
    for i in range(n):
        for j in range(m):
            S[i, j] = C[i, j] * C[i, j]
    return out


cdef inline void _theta_rho(double u, double* p, double* theta, double* logrho) nogil:
    cdef int m = <int> p[1]
    cdef int i
    cdef double wu
    theta[0] = 0.0
    logrho[0] = 0.0
    for i in range(m):
        wu = p[2 + i] * u
        theta[0] += atan(wu)
        logrho[0] += log1p(wu * wu)
    theta[0] *= 0.5
    logrho[0] *= 0.25


cdef api double imhof_integrand(double u, void* user_data) nogil:
    """sin(theta(u)) / (u rho(u)); finite limit (sum w - t)/2 at u = 0."""
    cdef double* p = <double*> user_data
    cdef double t = p[0]
    cdef int m = <int> p[1]
    cdef int i
    cdef double s
    cdef double theta, logrho
    if u == 0.0:
        s = 0.0
        for i in range(m):
            s += p[2 + i]
        return 0.5 * (s - t)
    _theta_rho(u, p, &theta, &logrho)
    return sin(theta - 0.5 * t * u) / (u * exp(logrho))


cdef api double imhof_amp_sin(double u, void* user_data) nogil:
    """sin(phi(u)) / (u rho(u)); tail amplitude paired with cos(t u / 2)."""
    cdef double* p = <double*> user_data
    cdef double theta, logrho
    _theta_rho(u, p, &theta, &logrho)
    return sin(theta) / (u * exp(logrho))


cdef api double imhof_amp_cos(double u, void* user_data) nogil:
    """cos(phi(u)) / (u rho(u)); tail amplitude paired with sin(t u / 2)."""
    cdef double* p = <double*> user_data
    cdef double theta, logrho
    _theta_rho(u, p, &theta, &logrho)
    return cos(theta) / (u * exp(logrho))


def imhof_integrand_py(double u, double[::1] params):
    """Python-callable wrapper, used by the benchmark and tests."""
    return imhof_integrand(u, &params[0])
