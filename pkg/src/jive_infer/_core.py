"""Backend selection for the hot kernels.

The compiled ``_ext`` module is used when it imports; otherwise (or when
``JIVE_INFER_PURE=1``) the numpy/pure-Python fallback is used. Both expose the
same functions with the same results up to floating-point rounding.
"""

from __future__ import annotations

import ctypes
import os

import numpy as np
from scipy import LowLevelCallable

from . import _fallback

_ext = None
if os.environ.get("JIVE_INFER_PURE", "") != "1":
    try:
        from . import _ext  # type: ignore[attr-defined, no-redef]
    except ImportError:  # extension not built
        _ext = None

BACKEND = "compiled" if _ext is not None else "python"


def _c_contig(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def jackknife_c(P, lam, backend: str | None = None):
    if _use_ext(backend):
        return _ext.jackknife_c(_c_contig(P), _c_contig(lam))
    return _fallback.jackknife_c(P, lam)


def crossfit_weights(C, B, tol, backend: str | None = None):
    if _use_ext(backend):
        return _ext.crossfit_weights(_c_contig(C), _c_contig(B), float(tol))
    return _fallback.crossfit_weights(C, B, tol)


def hadamard_square(C, backend: str | None = None):
    if _use_ext(backend):
        return _ext.hadamard_square(_c_contig(C))
    return _fallback.hadamard_square(C)


def _use_ext(backend):
    if backend is None:
        return _ext is not None
    if backend == "compiled":
        if _ext is None:
            raise RuntimeError("compiled extension is not available")
        return True
    return False


class ImhofFunctions:
    """The three Imhof integrands bound to a threshold ``t`` and weights ``w``.

    Attributes ``integrand``, ``amp_sin`` and ``amp_cos`` are directly usable as
    the ``func`` argument of :func:`scipy.integrate.quad`. Keep the instance
    alive for as long as the callables are in use (it owns the parameter
    buffer the compiled callables point into).
    """

    def __init__(self, t: float, w, backend: str | None = None):
        w = [float(x) for x in w]
        if _use_ext(backend):
            self._buf = np.array([float(t), float(len(w)), *w], dtype=np.float64)
            ptr = ctypes.cast(self._buf.ctypes.data, ctypes.c_void_p)
            self.integrand = LowLevelCallable.from_cython(_ext, "imhof_integrand", ptr)
            self.amp_sin = LowLevelCallable.from_cython(_ext, "imhof_amp_sin", ptr)
            self.amp_cos = LowLevelCallable.from_cython(_ext, "imhof_amp_cos", ptr)
        else:
            t = float(t)
            self.integrand = lambda u: _fallback.imhof_integrand(u, t, w)
            self.amp_sin = lambda u: _fallback.imhof_amp_sin(u, t, w)
            self.amp_cos = lambda u: _fallback.imhof_amp_cos(u, t, w)
