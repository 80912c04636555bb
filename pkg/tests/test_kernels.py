"""Jackknife kernel construction."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from jive_infer import _core
from jive_infer.errors import KernelConstructionError, SingularityError
from jive_infer.kernels import (
    KernelCache,
    Method,
    build_kernel,
    build_kernels,
    projection_diag_and_hat,
)


def _random_Z(seed, n, k):
    return np.random.default_rng(seed).standard_normal((n, k))


class TestProjection:
    def test_ones_n2(self):
        P, d = projection_diag_and_hat(np.ones((2, 1)))
        np.testing.assert_allclose(P, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
        np.testing.assert_allclose(d, [0.5, 0.5], atol=1e-15)

    def test_single_column(self):
        P, d = projection_diag_and_hat(np.array([1.0, 2.0]))
        np.testing.assert_allclose(P, [[0.2, 0.4], [0.4, 0.8]], atol=1e-15)
        np.testing.assert_allclose(d, [0.2, 0.8], atol=1e-15)

    def test_idempotent_trace(self):
        P, d = projection_diag_and_hat(_random_Z(0, 20, 4))
        assert np.max(np.abs(P @ P - P)) < 1e-12
        assert np.trace(P) == pytest.approx(4.0, abs=1e-12)
        np.testing.assert_allclose(np.diag(P), d, atol=1e-14)

    def test_rank_deficient(self):
        Z = _random_Z(1, 10, 2)
        Z = np.column_stack([Z, Z[:, 0] + Z[:, 1]])
        with pytest.raises(KernelConstructionError):
            projection_diag_and_hat(Z)


class TestHandKernels:
    def test_hlim_ones(self):
        kern = build_kernel(np.ones((2, 1)), "HLIM")
        np.testing.assert_allclose(kern.C, [[0.0, 0.5], [0.5, 0.0]], atol=1e-15)
        np.testing.assert_array_equal(kern.B, np.eye(2))
        assert kern.trB == 2.0

    def test_sjive_ones(self):
        kern = build_kernel(np.ones((2, 1)), "SJIVE")
        np.testing.assert_allclose(kern.C, [[0.0, 1.0], [1.0, 0.0]], atol=1e-14)
        np.testing.assert_allclose(kern.B, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-14)
        assert kern.trB == 1.0
        assert np.trace(kern.B) == pytest.approx(1.0, abs=1e-14)

    def test_sjive_random_invariants(self):
        kern = build_kernel(_random_Z(2, 30, 6), "SJIVE")
        assert np.max(np.abs(np.diag(kern.C))) <= 1e-10 * np.max(np.abs(kern.C))
        assert np.trace(kern.B) == pytest.approx(6.0, abs=1e-10 * 6)


@pytest.mark.parametrize("seed", range(5))
def test_invariants_all_methods(seed, method):
    rng = np.random.default_rng(seed)
    n, k = int(rng.integers(12, 40)), int(rng.integers(1, 6))
    Z = rng.standard_normal((n, k))
    kern = build_kernel(Z, method)
    C, B = kern.C, kern.B
    np.testing.assert_array_equal(C, C.T)
    assert np.max(np.abs(np.diag(C))) <= 1e-10 * np.max(np.abs(C))
    np.testing.assert_allclose(B, B.T, atol=0)
    assert np.linalg.eigvalsh(B).min() >= -1e-10
    assert np.trace(B) == pytest.approx(kern.trB, rel=1e-10)
    P, d = projection_diag_and_hat(Z)
    if Method.parse(method).symmetric_jackknife:
        assert kern.trB == float(k)
        I = np.eye(n)
        ref = (I - P) @ np.diag(d / (1 - d)) @ (I - P)
        np.testing.assert_allclose(B, ref, rtol=0, atol=1e-12 * np.max(np.abs(ref)))
    else:
        assert kern.trB == float(n)
        np.testing.assert_array_equal(B, np.eye(n))
        assert np.max(np.abs(C + np.diag(d) - P)) <= 1e-14
    assert kern.is_ratio == (method in ("SJIVE", "HLIM"))


@pytest.mark.parametrize("method", ["SJIVE", "HLIM"])
def test_noiseless_xcx(method):
    rng = np.random.default_rng(3)
    n, k = 40, 5
    Z = rng.standard_normal((n, k))
    Pi = rng.standard_normal((k, 2))
    X = Z @ Pi
    kern = build_kernel(Z, method)
    d = kern.P_diag
    ref = Pi.T @ Z.T @ Z @ Pi
    if method == "HLIM":
        ref = ref - Pi.T @ Z.T @ np.diag(d) @ Z @ Pi
    np.testing.assert_allclose(X.T @ kern.C @ X, ref, rtol=1e-10)


def test_rotation_invariance(method):
    rng = np.random.default_rng(4)
    Z = rng.standard_normal((25, 4))
    Q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    k1, k2 = build_kernel(Z, method), build_kernel(Z @ Q, method)
    np.testing.assert_allclose(k1.C, k2.C, atol=1e-12)
    np.testing.assert_allclose(k1.B, k2.B, atol=1e-12)


def test_leverage_one_names_observation():
    Z = np.zeros((6, 2))
    Z[:, 0] = 1.0
    Z[3, 1] = 1.0  # observation 3 is the only one loading on column 2
    with pytest.raises(SingularityError) as exc:
        build_kernel(Z, "SJIVE")
    assert exc.value.index == 3


def test_shared_kernels_match_single():
    Z = _random_Z(5, 20, 3)
    ks = build_kernels(Z, ["SJIVE", "JIVE1", "HLIM", "JIVE2"])
    for m, kern in ks.items():
        single = build_kernel(Z, m)
        np.testing.assert_array_equal(kern.C, single.C)
        np.testing.assert_array_equal(kern.B, single.B)
    assert ks[Method.SJIVE].C is ks[Method.JIVE1].C


def test_kernel_arrays_read_only():
    kern = build_kernel(_random_Z(6, 10, 2), "SJIVE")
    with pytest.raises(ValueError):
        kern.C[0, 1] = 1.0


def test_crossfit_weights_definition(method):
    kern = build_kernel(_random_Z(7, 15, 3), method)
    C, B = kern.ar_pair()
    b = np.diag(B)
    ref = C**2 / (np.outer(b, b) + B**2)
    np.testing.assert_allclose(kern.ar_M(), ref, rtol=1e-13)


def test_kernel_cache_roundtrip(tmp_path):
    Z = _random_Z(8, 12, 2)
    cache = KernelCache(tmp_path)
    first = cache.get(Z, "SJIVE")
    again = cache.get(Z, "SJIVE")
    np.testing.assert_array_equal(first.C, again.C)
    np.testing.assert_array_equal(first.B, again.B)
    assert len(list(tmp_path.glob("*.npz"))) == 1
    assert KernelCache.key(Z, "SJIVE") != KernelCache.key(Z, "HLIM")


@pytest.mark.skipif(_core.BACKEND != "compiled", reason="extension not built")
@given(st.integers(2, 30), st.integers(0, 2**31))
def test_backends_agree(n, seed):
    rng = np.random.default_rng(seed)
    P = rng.standard_normal((n, n))
    P = P + P.T
    lam = rng.uniform(0, 2, n)
    np.testing.assert_allclose(_core.jackknife_c(P, lam, "compiled"),
                               _core.jackknife_c(P, lam, "python"), rtol=1e-13, atol=1e-13)
    B = np.abs(P) + 1.0
    Mc, bc = _core.crossfit_weights(P, B, 1e-14, "compiled")
    Mp, bp = _core.crossfit_weights(P, B, 1e-14, "python")
    np.testing.assert_allclose(Mc, Mp, rtol=1e-13)
    assert bc == bp
    np.testing.assert_array_equal(_core.hadamard_square(P, "compiled"),
                                  _core.hadamard_square(P, "python"))
