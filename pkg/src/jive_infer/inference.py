"""Test statistics, their reference laws and p-values.

Unstarred statistics (D, LM, W1, W2) are referred to a weighted sum of
chi-square(1) variates with weights ``eig(Xi Phi)``; starred statistics
(Dstar1, Dstar2, LMstar, W1star, W2star) to chi-square(g) or chi-square(p).

Plug-in points: Wald statistics and the D coefficient use the unrestricted
estimate; LM statistics use the null value (full vector) or the restricted
estimate (linear restriction). The modified objective ``Q*`` of the starred
distance statistics and its correction term use the operators at the null or
restricted point, which makes ``Dstar1 == LMstar`` exactly for the JIVE
objectives.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .dataio import IVDataset, LinearRestriction
from .distributions import chisq_sf, normal_sf, weighted_chisq_sf
from .errors import (
    ConditioningError,
    NumericalError,
    UsageError,
    VarianceDegeneracyError,
)
from .estimators import (
    EstimationResult,
    ObjectiveMoments,
    RestrictedEstimationResult,
    estimate_restricted,
    estimate_unrestricted,
    exact_fit,
)
from .kernels import JackknifeKernel
from .variance import PluginSet, VarianceMode, plugin_set, restriction_operators

WEIGHT_RTOL = 1e-12


class Family(str, enum.Enum):
    D = "D"
    LM = "LM"
    W1 = "W1"
    W2 = "W2"
    DSTAR1 = "Dstar1"
    DSTAR2 = "Dstar2"
    LMSTAR = "LMstar"
    W1STAR = "W1star"
    W2STAR = "W2star"
    AR = "AR"

    @property
    def starred(self) -> bool:
        return self.value.endswith("star") or self.value.startswith("Dstar")

    @property
    def default_reference(self) -> "Reference":
        if self is Family.AR:
            return Reference.STD_NORMAL
        return Reference.CHISQ if self.starred else Reference.CHIBAR

    @classmethod
    def parse(cls, value) -> "Family":
        if isinstance(value, cls):
            return value
        s = str(value).strip()
        for f in cls:
            if f.value.lower() == s.lower() or f.name.lower() == s.lower():
                return f
        aliases = {"d*1": cls.DSTAR1, "d*2": cls.DSTAR2, "lm*": cls.LMSTAR,
                   "w*1": cls.W1STAR, "w*2": cls.W2STAR, "d*": cls.DSTAR1}
        if s.lower() in aliases:
            return aliases[s.lower()]
        raise UsageError(f"unknown test family {value!r}")


def _objective_gap(kernel, mom, est, beta, Q_beta=None) -> float:
    """``Q(beta) - Q(beta_hat)``. For quadratic objectives the gradient vanishes at
    ``beta_hat``, so the gap is ``d'X'CXd`` and avoids cancellation."""
    if not kernel.is_ratio:
        dv = np.asarray(beta, dtype=float) - est.beta_hat
        return float(dv @ mom.XCX() @ dv)
    return (mom.Q(beta) if Q_beta is None else Q_beta) - est.Q_at_min


TRINITY = (Family.D, Family.LM, Family.W1, Family.W2,
           Family.DSTAR1, Family.DSTAR2, Family.LMSTAR, Family.W1STAR, Family.W2STAR)


class Reference(str, enum.Enum):
    CHIBAR = "chibar"
    CHISQ = "chisq"
    STD_NORMAL = "std_normal"

    @classmethod
    def parse(cls, value) -> "Reference":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise UsageError(f"unknown reference {value!r}") from None


class Hypothesis(str, enum.Enum):
    FULL_VECTOR = "full_vector"
    LINEAR_RESTRICTION = "linear_restriction"


@dataclass(frozen=True)
class TestReport:
    """One test statistic with its reference law and p-value."""

    __test__ = False  # not a pytest class

    method: str
    family: Family
    hypothesis: Hypothesis
    statistic: float
    reference: Reference
    p_value: float
    variance_mode: str
    weights: tuple | None = None
    df: int | None = None
    plugin_points: dict = field(default_factory=dict)

    def rejects(self, nominal: float) -> bool:
        return self.p_value < nominal

    def to_json(self) -> dict:
        out = {
            "method": self.method,
            "family": self.family.value,
            "hypothesis": self.hypothesis.value,
            "statistic": self.statistic,
            "reference": self.reference.value,
            "p_value": self.p_value,
            "variance_mode": self.variance_mode,
            "plugin_points": self.plugin_points,
        }
        if self.weights is not None:
            out["weights"] = list(self.weights)
        if self.df is not None:
            out["df"] = self.df
        return out


def _check_reference(family: Family, reference) -> Reference:
    want = family.default_reference
    if reference is None:
        return want
    ref = Reference.parse(reference)
    if ref is not want:
        raise UsageError(
            f"family {family.value} is referred to {want.value}, not {ref.value}"
        )
    return ref


def _chol_inv(M, factor):
    try:
        c = linalg.cho_factor(0.5 * (M + M.T))
    except linalg.LinAlgError:
        raise ConditioningError(f"{factor} is not positive definite", factor=factor) from None
    return c


def _quad_inv(c, v) -> float:
    return float(v @ linalg.cho_solve(c, v))


def _solve(M, v, factor):
    try:
        with np.errstate(all="raise"):
            return linalg.solve(M, v, assume_a="sym")
    except (linalg.LinAlgError, FloatingPointError):
        raise ConditioningError(f"{factor} is singular", factor=factor) from None


def _clean_weights(vals) -> tuple:
    vals = np.asarray(vals, dtype=float)
    top = float(vals.max()) if vals.size else 0.0
    if not top > 0.0:
        raise ConditioningError("no positive chi-bar weight", factor="Xi Phi")
    kept = np.sort(vals[vals > WEIGHT_RTOL * top])[::-1]
    return tuple(float(x) for x in kept)


def chibar_weights_full(ps: PluginSet) -> tuple:
    """Nonzero eigenvalues of ``r_min H^-1 Phi`` (H positive definite)."""
    if not ps.r_min > 0.0:
        raise ConditioningError("H is not positive definite", factor="H")
    R = _chol_inv(ps.H, "H")[0]
    # H = U'U with U upper triangular; H^-1 Phi ~ U^-T Phi U^-1
    Ri = linalg.solve_triangular(np.triu(R), np.eye(R.shape[0]))
    S = Ri.T @ ps.Phi @ Ri
    return _clean_weights(ps.r_min * np.linalg.eigvalsh(0.5 * (S + S.T)))


def chibar_weights_restricted(ps: PluginSet, A) -> tuple:
    """Nonzero eigenvalues of ``Xi_a Phi`` with Xi_a of rank p."""
    if not ps.r_min > 0.0:
        raise ConditioningError("H is not positive definite", factor="H")
    HiA = _solve(ps.H, A.T, "H")
    S = A @ HiA
    L = np.linalg.cholesky(np.linalg.inv(0.5 * (S + S.T)))
    T = (HiA @ L).T @ ps.Phi @ (HiA @ L)
    return _clean_weights(ps.r_min * np.linalg.eigvalsh(0.5 * (T + T.T)))


def _p_value(ref: Reference, stat: float, weights=None, df=None) -> float:
    if ref is Reference.CHIBAR:
        return weighted_chisq_sf(weights, stat)
    return chisq_sf(df, stat)


class _Fits:
    """Shared pieces for one (kernel, data) pair: moments and estimates."""

    def __init__(self, kernel, y, X, *, moments=None, unrestricted=None):
        self.kernel = kernel
        self.mom = moments if moments is not None else ObjectiveMoments(kernel, y, X)
        self.est = unrestricted if unrestricted is not None else estimate_unrestricted(
            kernel, y, X, moments=self.mom)


def _report(fits, family, hyp, stat, mode, reference, weights_fn, df, points):
    ref = _check_reference(family, reference)
    weights = None
    if ref is Reference.CHIBAR:
        weights = weights_fn()
        p = _p_value(ref, stat, weights=weights)
    else:
        p = _p_value(ref, stat, df=df)
    return TestReport(
        method=fits.kernel.method.value,
        family=family,
        hypothesis=hyp,
        statistic=float(stat),
        reference=ref,
        p_value=float(p),
        variance_mode=VarianceMode.parse(mode).value,
        weights=weights,
        df=df if ref is Reference.CHISQ else None,
        plugin_points=points,
    )


def _exact_null_report(fits, family, hyp, mode, reference, df):
    """A null that fits the data exactly carries no evidence against it."""
    ref = _check_reference(family, reference)
    return TestReport(
        method=fits.kernel.method.value,
        family=family,
        hypothesis=hyp,
        statistic=0.0,
        reference=ref,
        p_value=1.0,
        variance_mode=VarianceMode.parse(mode).value,
        df=df if ref is Reference.CHISQ else None,
        plugin_points={"exact_fit": True},
    )


def full_vector_tests(
    kernel: JackknifeKernel,
    y,
    X,
    beta0,
    families=TRINITY,
    variance_mode=VarianceMode.PLUGIN,
    reference=None,
    *,
    moments: ObjectiveMoments | None = None,
    unrestricted: EstimationResult | None = None,
    failures: dict | None = None,
) -> list[TestReport]:
    """Tests of ``H0: beta = beta0`` for several families sharing the fits.

    If ``failures`` is a dict, numerical errors raised while computing one
    family are stored there under the family instead of propagating.
    """
    fam = [Family.parse(f) for f in families]
    if Family.AR in fam:
        raise UsageError("use ar_test for the Anderson-Rubin family")
    fits = _Fits(kernel, y, X, moments=moments, unrestricted=unrestricted)
    mom, est = fits.mom, fits.est
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    if beta0.shape != (mom.g,):
        raise UsageError(f"beta0 must have length {mom.g}")
    k, g = kernel.k, mom.g
    rk = math.sqrt(k)
    hyp = Hypothesis.FULL_VECTOR
    bhat = est.beta_hat
    cache: dict = {}

    def ps_hat():
        if "hat" not in cache:
            cache["hat"] = plugin_set(kernel, y, X, bhat, variance_mode, moments=mom)
        return cache["hat"]

    def ps_0():
        if "0" not in cache:
            cache["0"] = plugin_set(kernel, y, X, beta0, variance_mode, moments=mom)
        return cache["0"]

    H = est.H_hat
    psi = H @ (bhat - beta0) / rk
    tau = mom.score(beta0) / rk
    pts_hat = {"H": "beta_hat", "Phi": "beta_hat", "r_min": "beta_hat"}
    pts_0 = {"H": "beta0", "Phi": "beta0", "r_min": "beta0"}
    exact, DF = exact_fit(mom.y, mom.y - mom.X @ beta0), g
    def one(f):
        if f is Family.D:
            stat = est.r_min * est.sigma2_hat / k * _objective_gap(kernel, mom, est, beta0)
            return (_report(fits, f, hyp, stat, variance_mode, reference,
                               lambda: chibar_weights_full(ps_hat()), g,
                               {**pts_hat, "sigma2": "beta_hat"}))
        elif f is Family.LM:
            p0 = ps_0()
            if not p0.r_min > 0:
                _raise_h()
            stat = p0.r_min * _quad_inv(_chol_inv(p0.H, "H(beta0)"), tau)
            return (_report(fits, f, hyp, stat, variance_mode, reference,
                               lambda: chibar_weights_full(ps_0()), g, pts_0))
        elif f in (Family.W1, Family.W2):
            if not est.r_min > 0:
                _raise_h()
            stat = est.r_min * _quad_inv(_chol_inv(H, "H(beta_hat)"), psi)
            return (_report(fits, f, hyp, stat, variance_mode, reference,
                               lambda: chibar_weights_full(ps_hat()), g, pts_hat))
        elif f is Family.LMSTAR:
            stat = _quad_inv(_chol_inv(ps_0().Phi, "Phi(beta0)"), tau)
            return (_report(fits, f, hyp, stat, variance_mode, reference,
                               None, g, {"Phi": "beta0"}))
        elif f in (Family.W1STAR, Family.W2STAR):
            stat = _quad_inv(_chol_inv(ps_hat().Phi, "Phi(beta_hat)"), psi)
            return (_report(fits, f, hyp, stat, variance_mode, reference,
                               None, g, {"H": "beta_hat", "Phi": "beta_hat"}))
        else:
            c = _chol_inv(ps_0().Phi, "Phi(beta0)")
            s2 = est.sigma2_hat

            def qstar(b):
                s = mom.score(b, lam=0.0)
                return _quad_inv(c, s) / mom.sigma2(b)

            lead = psi if f is Family.DSTAR1 else tau
            corr = 2.0 * rk / s2 * float(lead @ linalg.cho_solve(c, mom.score(bhat, lam=0.0)))
            stat = -s2 / k * (qstar(bhat) - qstar(beta0) + corr)
            return (_report(fits, f, hyp, stat, variance_mode, reference,
                               None, g, {"Phi": "beta0", "H": "beta_hat",
                                         "sigma2": "beta_hat"}))
    out = []
    for f in fam:
        if exact:
            out.append(_exact_null_report(fits, f, hyp, variance_mode, reference, DF))
            continue
        try:
            out.append(one(f))
        except NumericalError as exc:
            if failures is None:
                raise
            failures[f] = exc
    return out


def _raise_h():
    raise ConditioningError("H is not positive definite", factor="H")


def linear_restriction_tests(
    kernel: JackknifeKernel,
    y,
    X,
    restriction: LinearRestriction,
    families=TRINITY,
    variance_mode=VarianceMode.PLUGIN,
    reference=None,
    *,
    moments: ObjectiveMoments | None = None,
    unrestricted: EstimationResult | None = None,
    restricted: RestrictedEstimationResult | None = None,
    failures: dict | None = None,
) -> list[TestReport]:
    """Tests of ``H0: A beta = a`` for several families sharing the fits.

    ``failures`` works as in :func:`full_vector_tests`.
    """
    fam = [Family.parse(f) for f in families]
    if Family.AR in fam:
        raise UsageError("use ar_test for the Anderson-Rubin family")
    fits = _Fits(kernel, y, X, moments=moments, unrestricted=unrestricted)
    mom, est = fits.mom, fits.est
    A, a = restriction.A, restriction.a
    if A.shape[1] != mom.g:
        raise UsageError(f"restriction has {A.shape[1]} columns, model has {mom.g}")
    rest = restricted if restricted is not None else estimate_restricted(
        kernel, y, X, restriction, moments=mom)
    k, p = kernel.k, A.shape[0]
    rk = math.sqrt(k)
    hyp = Hypothesis.LINEAR_RESTRICTION
    bhat, btil = est.beta_hat, rest.beta_tilde
    cache: dict = {}

    def ps(which):
        if which not in cache:
            b = bhat if which == "hat" else btil
            cache[which] = plugin_set(kernel, y, X, b, variance_mode, moments=mom)
        return cache[which]

    def ops(which):
        key = "ops_" + which
        if key not in cache:
            cache[key] = restriction_operators(ps(which), restriction)
        return cache[key]

    H = est.H_hat
    d = A @ bhat - a
    theta = H @ (bhat - btil) / rk
    xi = mom.score(btil) / rk
    pts_hat = {"H": "beta_hat", "Phi": "beta_hat", "r_min": "beta_hat"}
    pts_til = {"H": "beta_tilde", "Phi": "beta_tilde", "r_min": "beta_tilde"}
    exact, DF = exact_fit(mom.y, rest.residuals), p
    w_hat = lambda: chibar_weights_restricted(ps("hat"), A)  # noqa: E731
    w_til = lambda: chibar_weights_restricted(ps("til"), A)  # noqa: E731
    def one(f):
        if f is Family.D:
            stat = est.r_min * est.sigma2_hat / k * _objective_gap(
                kernel, mom, est, btil, rest.Q_at_restricted)
            return (_report(fits, f, hyp, stat, variance_mode, reference, w_hat, p,
                               {**pts_hat, "sigma2": "beta_hat"}))
        elif f is Family.LM:
            if not rest.r_min_tilde > 0:
                _raise_h()
            stat = rest.r_min_tilde * _quad_inv(_chol_inv(rest.H_tilde, "H(beta_tilde)"), xi)
            return (_report(fits, f, hyp, stat, variance_mode, reference, w_til, p,
                               pts_til))
        elif f is Family.W1:
            if not est.r_min > 0:
                _raise_h()
            S = A @ _solve(H, A.T, "H(beta_hat)")
            stat = est.r_min / k * float(d @ _solve(S, d, "A H^-1 A'"))
            return (_report(fits, f, hyp, stat, variance_mode, reference, w_hat, p,
                               pts_hat))
        elif f is Family.W2:
            if not est.r_min > 0:
                _raise_h()
            stat = est.r_min * _quad_inv(_chol_inv(H, "H(beta_hat)"), theta)
            return (_report(fits, f, hyp, stat, variance_mode, reference, w_hat, p,
                               pts_hat))
        elif f is Family.LMSTAR:
            stat = float(xi @ ops("til").GPhiG_pinv @ xi)
            return (_report(fits, f, hyp, stat, variance_mode, reference, None, p,
                               pts_til))
        elif f is Family.W1STAR:
            HiA = _solve(H, A.T, "H(beta_hat)")
            V = HiA.T @ ps("hat").Phi @ HiA
            stat = _quad_inv(_chol_inv(V, "A H^-1 Phi H^-1 A'"), d) / k
            return (_report(fits, f, hyp, stat, variance_mode, reference, None, p,
                               pts_hat))
        elif f is Family.W2STAR:
            stat = float(theta @ ops("hat").GPhiG_pinv @ theta)
            return (_report(fits, f, hyp, stat, variance_mode, reference, None, p,
                               pts_hat))
        else:
            o = ops("til")
            K = o.Gamma.T @ o.GPhiG_pinv @ o.Gamma
            s2 = est.sigma2_hat

            def qstar(b):
                s = mom.score(b, lam=0.0)
                return float(s @ K @ s) / mom.sigma2(b)

            lead = theta if f is Family.DSTAR1 else xi
            corr = 2.0 * rk / s2 * float(lead @ o.GPhiG_pinv @ o.Gamma
                                         @ mom.score(bhat, lam=0.0))
            stat = s2 / k * (qstar(btil) - qstar(bhat) - corr)
            return (_report(fits, f, hyp, stat, variance_mode, reference, None, p,
                               {"Gamma": "beta_tilde", "Phi": "beta_tilde",
                                "H": "beta_hat", "sigma2": "beta_hat"}))
    out = []
    for f in fam:
        if exact:
            out.append(_exact_null_report(fits, f, hyp, variance_mode, reference, DF))
            continue
        try:
            out.append(one(f))
        except NumericalError as exc:
            if failures is None:
                raise
            failures[f] = exc
    return out


def test_full_vector(kernel, data: IVDataset, beta0, family, reference_kind=None,
                     variance_mode=VarianceMode.PLUGIN) -> TestReport:
    """Single-family wrapper around :func:`full_vector_tests`."""
    return full_vector_tests(kernel, data.y, data.X, beta0, [family], variance_mode,
                             reference_kind)[0]


def test_linear_restriction(kernel, data: IVDataset, restriction, family,
                            reference_kind=None,
                            variance_mode=VarianceMode.PLUGIN) -> TestReport:
    """Single-family wrapper around :func:`linear_restriction_tests`."""
    return linear_restriction_tests(kernel, data.y, data.X, restriction, [family],
                                    variance_mode, reference_kind)[0]


test_full_vector.__test__ = False
test_linear_restriction.__test__ = False


class ARVariant(str, enum.Enum):
    """Output labels of the two AR forms (symmetric jackknife, ``P - D``)."""

    CMS21 = "CMS21"
    MS22 = "MS22"


def ar_statistic(kernel: JackknifeKernel, y, X, beta0, variance_mode="naive"):
    """``(e'Ce / sqrt(k)) / sqrt(omega)`` and ``omega`` at ``beta0``.

    ``variance_mode`` is ``"naive"`` or ``"crossfit"``. The cross-fit variance
    uses the kernel's AR companion ``B`` (the symmetric jackknife ``B`` or
    ``I - P``).
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    e = np.asarray(y, dtype=float) - X @ np.atleast_1d(np.asarray(beta0, dtype=float))
    C, B = kernel.ar_pair()
    k = kernel.k
    num = float(e @ C @ e)
    mode = str(variance_mode).lower()
    if mode == "naive":
        e2 = e * e
        omega = 2.0 / k * float(e2 @ kernel.C2 @ e2)
    elif mode in ("crossfit", "cf"):
        w = (B @ e) * e
        omega = 2.0 / k * float(w @ kernel.ar_M() @ w)
    else:
        raise UsageError(f"unknown AR variance mode {variance_mode!r}")
    if not omega > 0.0:
        raise VarianceDegeneracyError(f"AR variance estimate {omega!r} is not positive")
    return num / math.sqrt(k) / math.sqrt(omega), omega


def ar_test(kernel: JackknifeKernel, data: IVDataset, beta0, variance_mode="naive",
            *, one_sided: bool = False) -> TestReport:
    """Anderson-Rubin test of ``H0: beta = beta0``; N(0, 1) reference.

    The variant label in ``plugin_points`` is set by the kernel: the symmetric
    jackknife form for SJIVE and JIVE1, the ``P - D`` form for HLIM and JIVE2.
    """
    variant = ARVariant.CMS21 if kernel.method.symmetric_jackknife else ARVariant.MS22
    points = {"variant": variant.value, "sided": "one" if one_sided else "two"}
    b0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    if exact_fit(data.y, data.y - data.X @ b0):
        stat, p = 0.0, 1.0
        points["exact_fit"] = True
    else:
        stat, _ = ar_statistic(kernel, data.y, data.X, b0, variance_mode)
        p = normal_sf(stat) if one_sided else min(1.0, 2.0 * normal_sf(abs(stat)))
    return TestReport(
        method=kernel.method.value,
        family=Family.AR,
        hypothesis=Hypothesis.FULL_VECTOR,
        statistic=float(stat),
        reference=Reference.STD_NORMAL,
        p_value=float(p),
        variance_mode=str(variance_mode).lower(),
        plugin_points=points,
    )
