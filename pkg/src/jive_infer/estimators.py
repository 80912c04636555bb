"""Objective functions and (restricted) minimizers.

All four objectives are functions of the two (g+1) x (g+1) moment matrices
``W'CW`` and ``W'BW`` with ``W = [y, X]``, so once those are formed every
evaluation of Q, the score or H is O(g^2) regardless of n.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .dataio import LinearRestriction
from .errors import (
    ConditioningError,
    DegenerateResidualError,
    NonConvergenceError,
    NormalizationError,
)
from .kernels import JackknifeKernel

NULLSPACE_RTOL = 1e-10
EIG_TIE_TOL = 1e-12
NORMALIZATION_TOL = 1e-12
LAMBDA_TOL = 1e-12
MAX_ITER = 500
EXACT_FIT_RTOL = 1e-12
DENOMINATOR_RTOL = 1e-12


def exact_fit(y, e) -> bool:
    """True if the residual ``e`` vanishes to rounding relative to ``y``."""
    scale = float(np.max(np.abs(y))) if np.size(y) else 0.0
    return float(np.max(np.abs(e))) <= EXACT_FIT_RTOL * scale


def _denominator_vanishes(eBe: float, ee: float, bmax: float) -> bool:
    """e'Be at rounding level relative to e'e max|B| counts as zero."""
    return not eBe > DENOMINATOR_RTOL * ee * bmax


def _as_beta(beta, g):
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if beta.shape != (g,):
        raise ValueError(f"beta must have length {g}, got shape {beta.shape}")
    return beta


def objective(kernel: JackknifeKernel, y, X, beta) -> float:
    """Q_n(beta) evaluated directly from the residual vector."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    e = np.asarray(y, dtype=float) - X @ _as_beta(beta, X.shape[1])
    num = float(e @ kernel.C @ e)
    if not kernel.is_ratio:
        return num
    if exact_fit(y, e):
        return 0.0
    eBe = float(e @ kernel.B @ e)
    if _denominator_vanishes(eBe, float(e @ e), _bmax(kernel)):
        raise DegenerateResidualError(
            f"denominator (y - X b)' B (y - X b) = {eBe!r} vanishes"
        )
    return num / (eBe / kernel.trB)


def _bmax(kernel) -> float:
    if "Bmax" not in kernel._cache:
        kernel._cache["Bmax"] = float(np.max(np.abs(kernel.B)))
    return kernel._cache["Bmax"]


class ObjectiveMoments:
    """Quadratic-form summaries of (y, X) under one kernel."""

    def __init__(self, kernel: JackknifeKernel, y, X):
        y = np.asarray(y, dtype=float)
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        self.kernel = kernel
        self.y = y
        self.X = X
        self.g = X.shape[1]
        W = np.column_stack([y, X])
        CW = kernel.C @ W
        self.CW = CW
        self.SC = W.T @ CW
        self.SC = 0.5 * (self.SC + self.SC.T)
        if kernel.is_ratio:
            SB = W.T @ (kernel.B @ W)
            self.SB = 0.5 * (SB + SB.T)
            self.SW = W.T @ W
            self._bmax = _bmax(kernel)
        else:
            self.SB = None

    @property
    def trB(self) -> float:
        return self.kernel.trB

    def _a(self, beta):
        return np.concatenate(([1.0], -_as_beta(beta, self.g)))

    def numerator(self, beta) -> float:
        a = self._a(beta)
        return float(a @ self.SC @ a)

    def sigma2(self, beta) -> float:
        """e'Be / tr(B); identically 1 for the quadratic-form objectives."""
        if self.SB is None:
            return 1.0
        a = self._a(beta)
        return float(a @ self.SB @ a) / self.trB

    def Q(self, beta) -> float:
        num = self.numerator(beta)
        if self.SB is None:
            return num
        if exact_fit(self.y, self.y - self.X @ _as_beta(beta, self.g)):
            # a zero residual is read as a perfect fit, Q = 0
            return 0.0
        a = self._a(beta)
        eBe = float(a @ self.SB @ a)
        if _denominator_vanishes(eBe, float(a @ self.SW @ a), self._bmax):
            raise DegenerateResidualError(f"objective denominator {eBe!r} vanishes")
        return num / (eBe / self.trB)

    def lam(self, beta) -> float:
        """lambda(beta) = Q(beta) / tr(B); zero for JIVE objectives."""
        if self.SB is None:
            return 0.0
        return self.Q(beta) / self.trB

    def XCX(self, lam: float = 0.0) -> np.ndarray:
        H = self.SC[1:, 1:]
        if lam != 0.0:
            H = H - lam * self.SB[1:, 1:]
        return H

    def XCy(self, lam: float = 0.0) -> np.ndarray:
        v = self.SC[1:, 0]
        if lam != 0.0:
            v = v - lam * self.SB[1:, 0]
        return v

    def H(self, beta) -> np.ndarray:
        """X' C_hat(beta) X with C_hat = C - lambda(beta) B."""
        return self.XCX(self.lam(beta))

    def score(self, beta, lam: float | None = None) -> np.ndarray:
        """X' C_hat(beta) (y - X beta)."""
        beta = _as_beta(beta, self.g)
        if lam is None:
            lam = self.lam(beta)
        return self.XCy(lam) - self.XCX(lam) @ beta

    def XBe(self, beta) -> np.ndarray:
        a = self._a(beta)
        return self.SB[1:, :] @ a


@dataclass(frozen=True)
class EstimationResult:
    beta_hat: np.ndarray
    Q_at_min: float
    lambda_hat: float
    residuals: np.ndarray
    H_hat: np.ndarray
    r_min: float
    sigma2_hat: float
    sigma12_hat: np.ndarray
    method: str
    gen_eigenvalue: float | None = None

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "beta_hat": self.beta_hat.tolist(),
            "Q_at_min": self.Q_at_min,
            "lambda_hat": self.lambda_hat,
            "r_min": self.r_min,
            "sigma2_hat": self.sigma2_hat,
            "sigma12_hat": self.sigma12_hat.tolist(),
            "H_hat": self.H_hat.tolist(),
        }


@dataclass(frozen=True)
class RestrictedEstimationResult:
    beta_tilde: np.ndarray
    gamma_tilde: np.ndarray
    Q_at_restricted: float
    lambda_tilde: float
    residuals: np.ndarray
    H_tilde: np.ndarray
    r_min_tilde: float
    iterations: int
    method: str

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "beta_tilde": self.beta_tilde.tolist(),
            "gamma_tilde": self.gamma_tilde.tolist(),
            "Q_at_restricted": self.Q_at_restricted,
            "lambda_tilde": self.lambda_tilde,
            "r_min_tilde": self.r_min_tilde,
            "iterations": self.iterations,
        }


def _min_eig(H) -> float:
    return float(np.linalg.eigvalsh(0.5 * (H + H.T))[0])


def _sym_solve(M, b, factor: str):
    try:
        with np.errstate(all="raise"):
            x = linalg.solve(M, b, assume_a="sym", check_finite=True)
    except (linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        raise ConditioningError(f"singular system in {factor}: {exc}", factor=factor) from None
    if not np.all(np.isfinite(x)):
        raise ConditioningError(f"non-finite solution in {factor}", factor=factor)
    return x


def smallest_generalized_eigenpair(N, Dm):
    """Smallest finite eigenpair of the pencil (N, Dm), Dm symmetric PSD.

    Directions in the null space of ``Dm`` (e.g. exogenous regressors that are
    annihilated by B) are profiled out through a Schur complement, which needs
    ``N`` positive definite on that null space; otherwise the ratio is
    unbounded below. Ties within ``EIG_TIE_TOL`` are broken towards the
    eigenvector with the largest first component.

    Returns ``(eigenvalue, vector)`` with the vector normalized to unit length.
    """
    N = 0.5 * (N + N.T)
    Dm = 0.5 * (Dm + Dm.T)
    if not (np.all(np.isfinite(N)) and np.all(np.isfinite(Dm))):
        raise ConditioningError("non-finite moment matrices", factor="pencil")
    d_eval, d_evec = np.linalg.eigh(Dm)
    scale = max(d_eval[-1], 0.0)
    if scale <= 0.0:
        raise DegenerateResidualError("denominator moment matrix is zero")
    keep = d_eval > NULLSPACE_RTOL * scale
    if np.all(keep):
        try:
            L = np.linalg.cholesky(Dm)
        except np.linalg.LinAlgError:
            raise ConditioningError("denominator not positive definite", factor="W'BW") from None
        Li = linalg.solve_triangular(L, np.eye(L.shape[0]), lower=True)
        S = Li @ N @ Li.T
        vals, vecs = np.linalg.eigh(0.5 * (S + S.T))
        vecs = Li.T @ vecs
    else:
        R = d_evec[:, keep]
        U = d_evec[:, ~keep]
        NUU = U.T @ N @ U
        NUR = U.T @ N @ R
        try:
            cf = linalg.cho_factor(NUU)
        except linalg.LinAlgError:
            raise ConditioningError(
                "objective unbounded below on the denominator null space",
                factor="profiled numerator",
            ) from None
        T = linalg.cho_solve(cf, NUR)  # t = -T s
        Neff = R.T @ N @ R - NUR.T @ T
        dinv = 1.0 / np.sqrt(d_eval[keep])
        S = (dinv[:, None] * Neff) * dinv[None, :]
        vals, svecs = np.linalg.eigh(0.5 * (S + S.T))
        s = dinv[:, None] * svecs
        vecs = R @ s - U @ (T @ s)
    if not np.all(np.isfinite(vals)):
        raise ConditioningError("non-finite generalized eigenvalues", factor="pencil")
    vecs = vecs / np.linalg.norm(vecs, axis=0)
    lo = vals[0]
    ties = np.flatnonzero(vals <= lo + EIG_TIE_TOL * max(1.0, abs(lo)))
    j = ties[np.argmax(np.abs(vecs[0, ties]))]
    return float(vals[j]), vecs[:, j]


def _finish_unrestricted(mom: ObjectiveMoments, beta, gen_eig=None) -> EstimationResult:
    k = mom.kernel
    e = mom.y - mom.X @ beta
    lam = mom.lam(beta)
    H = mom.XCX(lam)
    if k.is_ratio:
        s2 = mom.sigma2(beta)
        s12 = mom.XBe(beta) / mom.trB
    else:
        s2 = 1.0
        s12 = np.zeros(mom.g)
    return EstimationResult(
        beta_hat=beta,
        Q_at_min=mom.Q(beta),
        lambda_hat=lam,
        residuals=e,
        H_hat=H,
        r_min=_min_eig(H),
        sigma2_hat=s2,
        sigma12_hat=s12,
        method=k.method.value,
        gen_eigenvalue=gen_eig,
    )


def estimate_unrestricted(kernel: JackknifeKernel, y, X, *, moments=None) -> EstimationResult:
    """arg min Q_n(beta).

    JIVE objectives: ``(X'CX)^-1 X'Cy``. Ratio objectives: smallest generalized
    eigenvector of ``(W'CW, W'BW / tr B)``, rescaled to first component 1.
    """
    mom = moments if moments is not None else ObjectiveMoments(kernel, y, X)
    if not kernel.is_ratio:
        beta = _sym_solve(mom.XCX(), mom.XCy(), "X'CX")
        return _finish_unrestricted(mom, beta)
    b_ls = np.linalg.lstsq(mom.X, mom.y, rcond=None)[0]
    if exact_fit(mom.y, mom.y - mom.X @ b_ls):
        # noiseless data: the exact solution is the minimizer and the pencil
        # is singular along it
        return _finish_unrestricted(mom, b_ls)
    val, vec = smallest_generalized_eigenpair(mom.SC, mom.SB / mom.trB)
    if abs(vec[0]) < NORMALIZATION_TOL:
        raise NormalizationError(
            f"first eigenvector component {vec[0]!r} too small to normalize"
        )
    beta = -vec[1:] / vec[0]
    return _finish_unrestricted(mom, beta, gen_eig=val)


def _kkt_solve(mom: ObjectiveMoments, lam, A, a):
    g, p = mom.g, A.shape[0]
    K = np.zeros((g + p, g + p))
    K[:g, :g] = mom.XCX(lam)
    K[:g, g:] = A.T
    K[g:, :g] = A
    rhs = np.concatenate((mom.XCy(lam), a))
    sol = _sym_solve(K, rhs, "constrained FOC system")
    beta = sol[:g]
    # remove rounding drift from the constraint
    beta = beta - A.T @ np.linalg.solve(A @ A.T, A @ beta - a)
    return beta, sol[g:]


def estimate_restricted(
    kernel: JackknifeKernel,
    y,
    X,
    restriction: LinearRestriction,
    *,
    moments=None,
    max_iter: int = MAX_ITER,
) -> RestrictedEstimationResult:
    """Minimize Q_n(beta) subject to ``A beta = a``.

    JIVE objectives are quadratic, so one KKT solve with ``H = X'CX`` gives the
    exact constrained minimizer. Ratio objectives iterate on lambda: for fixed
    lambda solve the linear FOC system with ``C - lambda B``, then update
    ``lambda = Q(beta) / tr(B)``. The start value comes from the constrained
    JIVE-type solution under the same C. Steps are halved once the lambda
    increments have changed sign twice.
    """
    mom = moments if moments is not None else ObjectiveMoments(kernel, y, X)
    A, a = restriction.A, restriction.a
    if A.shape[1] != mom.g:
        raise ValueError(f"restriction has {A.shape[1]} columns, model has {mom.g}")
    beta, mu = _kkt_solve(mom, 0.0, A, a)
    iterations = 0
    if kernel.is_ratio:
        lam = mom.lam(beta)
        trajectory = [lam]
        prev_step = 0.0
        sign_changes = 0
        damp = 1.0
        for iterations in range(1, max_iter + 1):
            beta, mu = _kkt_solve(mom, lam, A, a)
            new = mom.lam(beta)
            step = new - lam
            if prev_step != 0.0 and step != 0.0 and np.sign(step) != np.sign(prev_step):
                sign_changes += 1
                if sign_changes >= 2:
                    damp = 0.5
            prev_step = step
            converged = abs(step) <= LAMBDA_TOL * (1.0 + abs(lam))
            lam = lam + damp * step if not converged else new
            trajectory.append(lam)
            if converged:
                break
        else:
            raise NonConvergenceError(
                f"restricted fixed point did not converge in {max_iter} iterations",
                trajectory=trajectory,
            )
    lam_t = mom.lam(beta)
    H = mom.XCX(lam_t)
    gamma = mu / mom.sigma2(beta)
    return RestrictedEstimationResult(
        beta_tilde=beta,
        gamma_tilde=gamma,
        Q_at_restricted=mom.Q(beta),
        lambda_tilde=lam_t,
        residuals=mom.y - mom.X @ beta,
        H_tilde=H,
        r_min_tilde=_min_eig(H),
        iterations=iterations,
        method=kernel.method.value,
    )
