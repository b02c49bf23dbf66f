#!/usr/bin/env python3
"""
Test dense linear-algebra primitives
"""

import math

import numpy as np
import pytest

from laplace_lora.core.errors import (
    DimTooLarge,
    KTooLarge,
    NonSquare,
    NotPD,
    NotPositiveDefinite,
    NotSymmetric,
)
from laplace_lora.core.linalg import (
    CholeskyFactor,
    LowRankFactor,
    cholesky,
    kron,
    logdet,
    svd_topk,
    unvec,
    vec,
)


def _spd(n, seed):
    g = np.random.default_rng(seed).standard_normal((n, n))
    return g.T @ g + np.eye(n)


class TestCholesky:
    def test_two_by_two_closed_form(self):
        c = cholesky(np.array([[4.0, 2.0], [2.0, 3.0]]))
        np.testing.assert_allclose(c.lower, [[2.0, 0.0], [1.0, math.sqrt(2.0)]], atol=1e-15)
        assert c.jitter == 0.0

    def test_identity(self):
        np.testing.assert_array_equal(cholesky(np.eye(3)).lower, np.eye(3))

    def test_random_spd_reconstruction(self):
        m = _spd(20, 7)
        c = cholesky(m)
        assert np.max(np.abs(c.reconstruct() - m)) < 1e-10
        assert np.all(np.diag(c.lower) > 0)

    def test_solve_matches_dense(self):
        m = _spd(6, 2)
        rhs = np.random.default_rng(3).standard_normal((6, 2))
        np.testing.assert_allclose(cholesky(m).solve(rhs), np.linalg.solve(m, rhs), rtol=1e-10)

    def test_rank_deficient_psd_needs_jitter(self):
        v = np.array([[1.0], [2.0], [3.0]])
        c = cholesky(v @ v.T)
        assert c.jitter > 0.0
        np.testing.assert_allclose(c.reconstruct(), v @ v.T + c.jitter * np.eye(3), atol=1e-10)

    def test_indefinite_raises(self):
        with pytest.raises(NotPositiveDefinite):
            cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_not_pd_alias(self):
        assert NotPD is NotPositiveDefinite

    def test_non_square_raises(self):
        with pytest.raises(NonSquare):
            cholesky(np.ones((2, 3)))

    def test_asymmetric_raises(self):
        with pytest.raises(NotSymmetric):
            cholesky(np.array([[2.0, 1.0], [0.0, 2.0]]))


class TestSvdTopk:
    def test_rank_one(self):
        b = np.array([1.0, 2.0, 2.0])
        u, s = svd_topk(np.outer(b, b), 1)
        assert s[0] == pytest.approx(float(b @ b))
        np.testing.assert_allclose(np.abs(u[:, 0]), np.abs(b) / np.linalg.norm(b), atol=1e-12)

    def test_degenerate_spectrum(self):
        u, s = svd_topk(np.eye(4), 2)
        np.testing.assert_allclose(s, [1.0, 1.0])
        np.testing.assert_allclose(u.T @ u, np.eye(2), atol=1e-12)

    def test_full_rank_reconstruction(self):
        m = np.random.default_rng(3).standard_normal((30, 8))
        u, s = svd_topk(m, 8)
        assert np.all(np.diff(s) <= 0)
        np.testing.assert_allclose(u @ (u.T @ m), m, atol=1e-8)
        np.testing.assert_allclose((u * s) @ (u * s).T, m @ m.T, atol=1e-8)

    def test_k_zero(self):
        u, s = svd_topk(np.ones((3, 2)), 0)
        assert u.shape == (3, 0)
        assert s.shape == (0,)

    def test_k_too_large(self):
        with pytest.raises(KTooLarge):
            svd_topk(np.ones((3, 2)), 3)


class TestKron:
    def test_identity(self):
        np.testing.assert_array_equal(kron(np.eye(2), np.eye(2)), np.eye(4))

    def test_scalar(self):
        m = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(kron([[2.0]], m), 2.0 * m)

    def test_mixed_product_with_vec(self):
        rng = np.random.default_rng(1)
        a, b, x = (rng.standard_normal((3, 3)) for _ in range(3))
        # vec(A X B) == (B^T kron A) vec(X) under column stacking
        np.testing.assert_allclose(kron(b.T, a) @ vec(x), vec(a @ x @ b), atol=1e-12)

    def test_guard(self):
        with pytest.raises(DimTooLarge):
            kron(np.eye(100), np.eye(100))


class TestLogdet:
    def test_identity(self):
        assert logdet(cholesky(np.eye(5))) == 0.0

    def test_diag_e(self):
        assert logdet(cholesky(np.diag([math.e, math.e]))) == pytest.approx(2.0, abs=1e-14)

    def test_matches_slogdet(self):
        m = _spd(15, 9)
        sign, ref = np.linalg.slogdet(m)
        assert sign > 0
        assert abs(logdet(cholesky(m)) - ref) < 1e-10


def test_vec_is_column_stacking():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(vec(x), [1.0, 3.0, 2.0, 4.0])
    np.testing.assert_array_equal(unvec(vec(x), 2, 2), x)


def test_low_rank_factor():
    root = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    f = LowRankFactor(root)
    assert (f.dim, f.rank) == (3, 2)
    np.testing.assert_array_equal(f.gram(), root.T @ root)
    np.testing.assert_array_equal(f.dense(), root @ root.T)
    assert LowRankFactor.empty(4).rank == 0


def test_cholesky_factor_solve_lower():
    c = CholeskyFactor(lower=np.array([[2.0, 0.0], [1.0, 1.0]]))
    np.testing.assert_allclose(c.solve_lower(np.array([2.0, 2.0])), [1.0, 1.0])
