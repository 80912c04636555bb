"""Jackknife kernel matrices C and B for the four objective functions.

SJIVE / JIVE1 use the symmetric jackknife pair

    C = P + P L P - (P L + L P)/2 - B,   B = (I - P) L (I - P),   L = D (I - D)^-1

which simplifies to ``C = P - L + (P L + L P)/2`` (zero diagonal) and has
``tr(B) = k``. HLIM / JIVE2 use ``C = P - D`` with ``B = I``. JIVE1 and JIVE2
minimize the numerator only; their ``B`` is kept for the cross-fit variance.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _core
from .dataio import RANK_RTOL
from .errors import KernelConstructionError, SingularityError

LEVERAGE_GUARD = 1e-8
CROSSFIT_TOL = 1e-14


class Method(str, enum.Enum):
    SJIVE = "SJIVE"
    HLIM = "HLIM"
    JIVE1 = "JIVE1"
    JIVE2 = "JIVE2"

    @property
    def is_ratio(self) -> bool:
        return self in (Method.SJIVE, Method.HLIM)

    @property
    def symmetric_jackknife(self) -> bool:
        """True for the (P L P)-type pair shared by SJIVE and JIVE1."""
        return self in (Method.SJIVE, Method.JIVE1)

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"unknown method {value!r}; expected one of "
                             f"{[m.value for m in cls]}") from None


def _orthonormal_basis(Z: np.ndarray) -> np.ndarray:
    U, s, _ = np.linalg.svd(Z, full_matrices=False)
    k = Z.shape[1]
    if s.size == 0 or s[0] == 0.0 or np.sum(s > RANK_RTOL * s[0]) < k:
        raise KernelConstructionError("instrument matrix is rank deficient")
    return U


def projection_diag_and_hat(Z) -> tuple[np.ndarray, np.ndarray]:
    """Hat matrix ``P = Z (Z'Z)^-1 Z'`` and its diagonal, via an SVD basis."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    Q = _orthonormal_basis(Z)
    P = Q @ Q.T
    P = 0.5 * (P + P.T)
    return P, np.einsum("ij,ij->i", Q, Q)


@dataclass(frozen=True, eq=False)
class JackknifeKernel:
    method: Method
    C: np.ndarray
    B: np.ndarray
    trB: float
    P_diag: np.ndarray
    k: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def is_ratio(self) -> bool:
        """False for JIVE1/JIVE2: denominator 1, lambda = 0, sigma^2 = 1."""
        return self.method.is_ratio

    @property
    def C2(self) -> np.ndarray:
        """Elementwise square of C (beta-independent, computed once)."""
        if "C2" not in self._cache:
            self._cache["C2"] = _core.hadamard_square(self.C)
        return self._cache["C2"]

    @property
    def M(self) -> np.ndarray:
        """Cross-fit weights ``C**2 / (b b' + B**2)`` with ``b = diag(B)``."""
        if "M" not in self._cache:
            self._cache["M"] = crossfit_matrix(self.C, self.B)
        return self._cache["M"]

    def ar_pair(self) -> tuple[np.ndarray, np.ndarray]:
        """(C, B) of the matching Anderson-Rubin statistic.

        The symmetric-jackknife kernels reuse their own pair; the ``P - D``
        kernels pair ``C`` with ``B = I - P``.
        """
        if self.method.symmetric_jackknife:
            return self.C, self.B
        if "B_ar" not in self._cache:
            B = -self.C
            B[np.diag_indices_from(B)] = 1.0 - self.P_diag
            self._cache["B_ar"] = B
        return self.C, self._cache["B_ar"]

    def ar_M(self) -> np.ndarray:
        if self.method.symmetric_jackknife:
            return self.M
        if "M_ar" not in self._cache:
            self._cache["M_ar"] = crossfit_matrix(*self.ar_pair())
        return self._cache["M_ar"]


def crossfit_matrix(C, B) -> np.ndarray:
    from .errors import CrossFitDegeneracyError

    M, bad = _core.crossfit_weights(C, B, CROSSFIT_TOL)
    if bad:
        raise CrossFitDegeneracyError(
            f"{bad} cross-fit denominators b_i b_j + B_ij^2 vanish"
        )
    return M


def _check_leverage(P_diag: np.ndarray) -> None:
    slack = 1.0 - P_diag
    bad = np.flatnonzero(slack < LEVERAGE_GUARD)
    if bad.size:
        i = int(bad[0])
        raise SingularityError(
            f"observation {i} has projection diagonal {P_diag[i]!r}; "
            "D (I - D)^-1 is singular",
            index=i,
        )


def _symmetric_pair(P: np.ndarray, Q: np.ndarray, d: np.ndarray):
    lam = d / (1.0 - d)
    C = _core.jackknife_c(P, lam)
    # B = L - P L - L P + P L P, with P L P formed through the k-column basis
    PLP = Q @ ((Q.T * lam) @ Q) @ Q.T
    B = PLP - P * (lam[:, None] + lam[None, :])
    B[np.diag_indices_from(B)] += lam
    B = 0.5 * (B + B.T)
    return C, B


def _hlim_pair(P: np.ndarray, d: np.ndarray):
    C = P.copy()
    C[np.diag_indices_from(C)] = 0.0
    return C, np.eye(P.shape[0])


def build_kernels(Z, methods) -> dict[Method, JackknifeKernel]:
    """Build kernels for several methods sharing one projection."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    k = Z.shape[1]
    Q = _orthonormal_basis(Z)
    P = Q @ Q.T
    P = 0.5 * (P + P.T)
    d = np.einsum("ij,ij->i", Q, Q)
    _check_leverage(d)
    methods = [Method.parse(m) for m in methods]
    out: dict[Method, JackknifeKernel] = {}
    sym = hlim = None
    for m in methods:
        if m.symmetric_jackknife:
            if sym is None:
                sym = _symmetric_pair(P, Q, d)
            C, B = sym
            trB = float(k)
        else:
            if hlim is None:
                hlim = _hlim_pair(P, d)
            C, B = hlim
            trB = float(P.shape[0])
        for a in (C, B, d):
            a.setflags(write=False)
        out[m] = JackknifeKernel(m, C, B, trB, d, k)
    # JIVE1 and SJIVE (and HLIM/JIVE2) share matrices, so share caches too
    for a, b in ((Method.SJIVE, Method.JIVE1), (Method.HLIM, Method.JIVE2)):
        if a in out and b in out:
            object.__setattr__(out[b], "_cache", out[a]._cache)
    return out


def build_kernel(Z, method) -> JackknifeKernel:
    m = Method.parse(method)
    return build_kernels(Z, [m])[m]


class KernelCache:
    """On-disk cache of (C, B) keyed by a content hash of Z and the method.

    Useful when many tests run on one large dataset.
    """

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(Z, method) -> str:
        Z = np.ascontiguousarray(Z, dtype=float)
        h = hashlib.sha256()
        h.update(str(Z.shape).encode())
        h.update(Z.tobytes())
        h.update(Method.parse(method).value.encode())
        return h.hexdigest()

    def get(self, Z, method) -> JackknifeKernel:
        m = Method.parse(method)
        path = self.directory / f"{self.key(Z, m)}.npz"
        if path.exists():
            with np.load(path) as f:
                arrays = {name: f[name] for name in ("C", "B", "P_diag")}
                trB, k = float(f["trB"]), int(f["k"])
            for a in arrays.values():
                a.setflags(write=False)
            return JackknifeKernel(m, arrays["C"], arrays["B"], trB, arrays["P_diag"], k)
        kern = build_kernel(Z, m)
        tmp = path.with_suffix(".tmp.npz")
        np.savez(tmp, C=kern.C, B=kern.B, P_diag=kern.P_diag, trB=kern.trB, k=kern.k)
        tmp.replace(path)
        return kern
