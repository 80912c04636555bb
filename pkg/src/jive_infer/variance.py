"""Feasible plug-ins: H, sigma^2, sigma_12, Phi and the restriction operators."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .dataio import LinearRestriction
from .errors import ConditioningError
from .estimators import ObjectiveMoments, _as_beta, _min_eig
from .kernels import JackknifeKernel


class VarianceMode(str, enum.Enum):
    PLUGIN = "plugin"
    CROSSFIT = "crossfit"

    @classmethod
    def parse(cls, value) -> "VarianceMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown variance mode {value!r}") from None


@dataclass(frozen=True)
class PluginSet:
    eval_point: np.ndarray
    H: np.ndarray
    r_min: float
    sigma2: float
    sigma12: np.ndarray
    Phi: np.ndarray
    variance_mode: VarianceMode
    residuals: np.ndarray


def _tilde_X(kernel, X, e, sigma2, sigma12):
    if not kernel.is_ratio:
        return X
    return X - np.outer(e, sigma12 / sigma2)


def phi_hat(kernel: JackknifeKernel, Xt, e, mode=VarianceMode.PLUGIN) -> np.ndarray:
    """(1/k)(F + G) of the plug-in or cross-fit form, ``Xt`` the adjusted regressors.

    Cross-fit weights use ``B`` of the symmetric jackknife kernels and
    ``I - P`` for the ``P - D`` kernels.
    """
    mode = VarianceMode.parse(mode)
    G = kernel.C @ Xt
    if mode is VarianceMode.PLUGIN:
        U = e[:, None] * Xt
        Phi = (G.T * (e * e)) @ G + U.T @ (kernel.C2 @ U)
    else:
        # the P - D kernels have B = I, for which cross-fitting is void; they
        # use the I - P companion shared with their AR statistic
        B = kernel.ar_pair()[1]
        v = B @ e
        b = np.diag(B)
        Uv = v[:, None] * Xt
        Phi = (G.T * (e * v / b)) @ G + Uv.T @ (kernel.ar_M() @ Uv)
    Phi = Phi / kernel.k
    return 0.5 * (Phi + Phi.T)


def plugin_set(
    kernel: JackknifeKernel,
    y,
    X,
    beta,
    mode=VarianceMode.PLUGIN,
    *,
    moments: ObjectiveMoments | None = None,
) -> PluginSet:
    """All plug-in quantities at ``beta``.

    JIVE objectives have ``sigma^2 = 1``, ``H = X'CX`` and ``Xt = X``.
    """
    mode = VarianceMode.parse(mode)
    mom = moments if moments is not None else ObjectiveMoments(kernel, y, X)
    beta = _as_beta(beta, mom.g)
    e = mom.y - mom.X @ beta
    H = mom.H(beta)
    if kernel.is_ratio:
        s2 = mom.sigma2(beta)
        s12 = mom.XBe(beta) / kernel.trB
    else:
        s2, s12 = 1.0, np.zeros(mom.g)
    Xt = _tilde_X(kernel, mom.X, e, s2, s12)
    Phi = phi_hat(kernel, Xt, e, mode)
    return PluginSet(beta, H, _min_eig(H), s2, s12, Phi, mode, e)


def sigma_hat(kernel: JackknifeKernel, y, X, beta) -> np.ndarray:
    """(1/k) [1 -b'; 0 I] (y, X)'B(y, X) [1 0; -b I]."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    W = np.column_stack([y, X])
    g = X.shape[1]
    T = np.eye(g + 1)
    T[0, 1:] = -_as_beta(beta, g)
    return T @ (W.T @ kernel.B @ W) @ T.T / kernel.k


@dataclass(frozen=True)
class RestrictionOperators:
    Gamma: np.ndarray
    GPhiG_pinv: np.ndarray
    Xi_a: np.ndarray


def _inv(M, factor):
    M = 0.5 * (M + M.T)
    try:
        c = linalg.cho_factor(M)
    except linalg.LinAlgError:
        raise ConditioningError(f"{factor} is not positive definite", factor=factor) from None
    return linalg.cho_solve(c, np.eye(M.shape[0]))


def _inv_general(M, factor):
    try:
        with np.errstate(all="raise"):
            out = linalg.inv(M)
    except (linalg.LinAlgError, FloatingPointError):
        raise ConditioningError(f"{factor} is singular", factor=factor) from None
    return out


def restriction_operators(
    plugins: PluginSet, restriction: LinearRestriction
) -> RestrictionOperators:
    """Gamma = A'(A H^-1 A')^-1 A H^-1, the reflexive inverse of Gamma Phi Gamma'
    and Xi_a = r_min H^-1 A'(A H^-1 A')^-1 A H^-1.
    """
    A = restriction.A
    Hi = _inv_general(plugins.H, "H")
    Hi = 0.5 * (Hi + Hi.T)
    AHiA = A @ Hi @ A.T
    AHiA_inv = _inv_general(AHiA, "A H^-1 A'")
    Gamma = A.T @ AHiA_inv @ A @ Hi
    V = A @ Hi @ plugins.Phi @ Hi @ A.T
    V_inv = _inv(V, "A H^-1 Phi H^-1 A'")
    AA_inv = _inv(A @ A.T, "A A'")
    L = A.T @ AA_inv
    Gp = L @ AHiA @ V_inv @ AHiA @ L.T
    Xi = plugins.r_min * (Hi @ A.T @ AHiA_inv @ A @ Hi)
    return RestrictionOperators(Gamma, 0.5 * (Gp + Gp.T), 0.5 * (Xi + Xi.T))


def ginv_expanded(H, Phi, A) -> np.ndarray:
    """The second algebraic form of the reflexive inverse (for cross-checks)."""
    Hi = np.linalg.inv(H)
    S = np.linalg.inv(A @ Hi @ A.T)
    inner = S @ A @ Hi @ Phi @ Hi @ A.T @ S
    L = A.T @ np.linalg.inv(A @ A.T)
    return L @ np.linalg.inv(inner) @ L.T
