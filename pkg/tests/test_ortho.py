import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from motifreml.ortho import (HelmertOperator, OrthoComplement, RankError, build_complement,
                             commutation_permutation, complement_of_vector, helmert_apply,
                             numerical_rank, sandwich_inverse_apply, sandwich_logdet,
                             sandwich_prefactor)
from oracles import commutation_matrix, helmert_dense, null_basis, vec

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


class TestHelmert:
    @pytest.mark.parametrize("k", [2, 3, 5, 17, 64])
    def test_dense_matches_closed_form(self, k):
        np.testing.assert_allclose(HelmertOperator(k).dense(), helmert_dense(k), atol=1e-14)

    @pytest.mark.parametrize("k", [2, 4, 9, 33, 64])
    def test_orthonormal_rows_and_annihilates_ones(self, k):
        H = HelmertOperator(k).dense()
        np.testing.assert_allclose(H @ H.T, np.eye(k - 1), atol=1e-12)
        np.testing.assert_allclose(H @ np.ones(k), 0.0, atol=1e-12)
        np.testing.assert_allclose(H.T @ H, np.eye(k) - 1.0 / k, atol=1e-12)

    def test_k_below_two_rejected(self):
        with pytest.raises(ValueError):
            HelmertOperator(1)

    def test_wrong_row_count(self):
        with pytest.raises(ValueError, match="expected 4 rows"):
            HelmertOperator(4).apply(np.ones((3, 2)))

    @given(st.integers(2, 40), st.integers(1, 4), st.data())
    @settings(max_examples=60, deadline=None)
    def test_transpose_ops_are_adjoint(self, k, c, data):
        op = HelmertOperator(k)
        X = data.draw(arrays(float, (k, c), elements=finite))
        Y = data.draw(arrays(float, (k - 1, c), elements=finite))
        lhs = np.sum(op.apply(X) * Y)
        rhs = np.sum(X * op.apply_t(Y))
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-6)
        np.testing.assert_allclose(op.apply_right(X.T), op.apply(X).T)
        np.testing.assert_allclose(op.apply_right_t(Y.T), op.apply_t(Y).T)

    @given(arrays(float, st.integers(2, 30), elements=finite))
    @settings(max_examples=60, deadline=None)
    def test_centering_identity(self, x):
        # H^T H x is x minus its mean
        op = HelmertOperator(x.size)
        np.testing.assert_allclose(op.apply_t(op.apply(x)), x - x.mean(), atol=1e-8)

    def test_helmert_apply_sides(self):
        rng = np.random.default_rng(0)
        op = HelmertOperator(6)
        X = rng.normal(size=(6, 3))
        np.testing.assert_allclose(helmert_apply(op, X), op.dense() @ X)
        np.testing.assert_allclose(helmert_apply(op, X.T, side="right"), X.T @ op.dense().T)
        with pytest.raises(ValueError):
            helmert_apply(op, X, side="middle")


class TestSandwich:
    @pytest.mark.parametrize("k", [2, 3, 8, 64])
    def test_inverse_apply_matches_dense(self, k):
        rng = np.random.default_rng(k)
        d = rng.uniform(0.1, 5.0, size=k)
        v = rng.normal(size=(k, 3))
        H = helmert_dense(k)
        dense = H.T @ np.linalg.inv(H @ np.diag(d) @ H.T) @ H @ v
        np.testing.assert_allclose(sandwich_inverse_apply(d, v), dense, atol=1e-10)
        np.testing.assert_allclose(sandwich_inverse_apply(d, v[:, 0]), dense[:, 0], atol=1e-10)

    @pytest.mark.parametrize("k", [2, 5, 64])
    def test_logdet_and_prefactor(self, k):
        rng = np.random.default_rng(100 + k)
        d = rng.uniform(0.1, 5.0, size=k)
        H = helmert_dense(k)
        _, ld = np.linalg.slogdet(H @ np.diag(d) @ H.T)
        assert sandwich_logdet(d) == pytest.approx(ld, abs=1e-9)
        assert sandwich_prefactor(d) == pytest.approx(np.prod(d) / (k * np.exp(ld)), rel=1e-9)

    def test_constant_diagonal_reduces_to_projection(self):
        k = 7
        v = np.arange(k, dtype=float)
        np.testing.assert_allclose(sandwich_inverse_apply(np.full(k, 2.0), v),
                                   (v - v.mean()) / 2.0, atol=1e-12)

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            sandwich_logdet(np.array([1.0, 0.0, 2.0]))


class TestComplement:
    def test_annihilates_loadings(self):
        rng = np.random.default_rng(1)
        B = rng.uniform(0.1, 1.1, size=(500, 60))
        oc, svd = build_complement(B)
        assert svd.rank == 60
        assert np.max(np.abs(oc.apply(B))) < 1e-9

    def test_orthonormal_by_probes(self):
        rng = np.random.default_rng(2)
        B = rng.normal(size=(200, 15))
        oc, _ = build_complement(B)
        probes = rng.normal(size=(200 - 15, 8))
        # Q_N^T Q_N x = x for every probe
        np.testing.assert_allclose(oc.apply(oc.apply_t(probes)), probes, atol=1e-10)

    def test_projection_matches_dense(self):
        rng = np.random.default_rng(3)
        B = rng.normal(size=(12, 4))
        oc, _ = build_complement(B)
        _, QN = null_basis(B)
        x = rng.normal(size=(12, 2))
        np.testing.assert_allclose(oc.apply_t(oc.apply(x)), QN @ QN.T @ x, atol=1e-12)

    def test_basis_apply_matches_svd_basis(self):
        rng = np.random.default_rng(4)
        B = rng.normal(size=(30, 5))
        oc, svd = build_complement(B)
        X = rng.normal(size=(30, 3))
        np.testing.assert_allclose(oc.basis_apply(X), svd.qc.T @ X, atol=1e-12)

    def test_rank_deficient(self):
        rng = np.random.default_rng(5)
        B = rng.normal(size=(20, 3))
        B = np.hstack([B, B[:, :1] + B[:, 1:2]])
        oc, svd = build_complement(B)
        assert svd.rank == 3
        assert oc.apply(B).shape == (17, 4)
        assert np.max(np.abs(oc.apply(B))) < 1e-10

    def test_zero_matrix_raises(self):
        with pytest.raises(RankError):
            build_complement(np.zeros((5, 2)))

    def test_numerical_rank_of_empty(self):
        assert numerical_rank(np.array([]), (3, 0)) == 0

    @given(arrays(float, st.integers(2, 20), elements=st.floats(0.1, 10)))
    @settings(max_examples=50, deadline=None)
    def test_complement_of_vector(self, v):
        oc = complement_of_vector(v)
        assert isinstance(oc, OrthoComplement)
        np.testing.assert_allclose(oc.apply(v), 0.0, atol=1e-9 * np.linalg.norm(v))
        E = oc.apply(np.eye(v.size))
        np.testing.assert_allclose(E @ E.T, np.eye(v.size - 1), atol=1e-10)


class TestCommutation:
    @pytest.mark.parametrize("n,m", [(1, 1), (2, 3), (3, 2), (4, 5), (6, 1)])
    def test_diagonal_conjugation(self, n, m):
        rng = np.random.default_rng(n * 10 + m)
        s = rng.normal(size=n * m)
        C = commutation_matrix(n, m)
        np.testing.assert_allclose(np.diag(C @ np.diag(s) @ C.T), s[commutation_permutation(n, m)])

    def test_commutes_kronecker(self):
        rng = np.random.default_rng(7)
        A, Bm = rng.normal(size=(3, 3)), rng.normal(size=(2, 2))
        C = commutation_matrix(2, 3)
        np.testing.assert_allclose(C @ np.kron(A, Bm) @ C.T, np.kron(Bm, A), atol=1e-12)

    def test_oracle_convention(self):
        A = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(commutation_matrix(2, 3) @ vec(A), vec(A.T))

    @given(st.integers(1, 12), st.integers(1, 12))
    def test_is_permutation(self, n, m):
        pi = commutation_permutation(n, m)
        np.testing.assert_array_equal(np.sort(pi), np.arange(n * m))
        # inverse of the (n, m) rule is the (m, n) rule
        np.testing.assert_array_equal(pi[commutation_permutation(m, n)], np.arange(n * m))


class TestWorkedValues:
    def test_two_point_helmert(self):
        op = HelmertOperator(2)
        np.testing.assert_allclose(op.apply(np.array([1.0, 1.0])), [0.0], atol=1e-15)
        np.testing.assert_allclose(op.apply(np.array([1.0, 0.0])), [1 / np.sqrt(2)])

    def test_two_point_sandwich(self):
        out = sandwich_inverse_apply(np.array([1.0, 2.0]), np.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [1 / 3, -1 / 3], atol=1e-15)

    def test_logdet_values(self):
        assert sandwich_logdet(np.ones(5)) == pytest.approx(0.0, abs=1e-13)
        assert sandwich_logdet(np.array([1.0, 2.0, 3.0])) == pytest.approx(np.log(11 / 3))

    @given(arrays(float, st.integers(2, 64), elements=st.floats(0.05, 20)),
           st.floats(0.01, 100))
    @settings(max_examples=50, deadline=None)
    def test_logdet_homogeneity(self, d, c):
        diff = sandwich_logdet(c * d) - sandwich_logdet(d)
        assert diff == pytest.approx((d.size - 1) * np.log(c), abs=1e-9)

    @pytest.mark.parametrize("k", [2, 7, 31, 64])
    def test_logdet_dense_relative(self, k):
        d = np.random.default_rng(k).uniform(0.1, 10, k)
        H = helmert_dense(k)
        _, ld = np.linalg.slogdet(H @ np.diag(d) @ H.T)
        assert sandwich_logdet(d) == pytest.approx(ld, rel=1e-9, abs=1e-12)

    def test_permutation_two_by_three(self):
        np.testing.assert_array_equal(commutation_permutation(2, 3), [0, 2, 4, 1, 3, 5])

    @pytest.mark.parametrize("n,m", [(1, 5), (4, 1)])
    def test_permutation_trivial(self, n, m):
        np.testing.assert_array_equal(commutation_permutation(n, m), np.arange(n * m))

    def test_axis_aligned_complement(self):
        B = np.array([[1.0], [0.0], [0.0]])
        oc, _ = build_complement(B)
        np.testing.assert_allclose(oc.apply(B), 0.0, atol=1e-15)
        E = oc.apply(np.eye(3))
        # the complement is spanned by the second and third axes
        np.testing.assert_allclose(E[:, 0], 0.0, atol=1e-15)
        np.testing.assert_allclose(np.abs(np.linalg.det(E[:, 1:])), 1.0)

    def test_range_column_is_annihilated(self):
        rng = np.random.default_rng(8)
        oc, svd = build_complement(rng.normal(size=(20, 4)))
        np.testing.assert_allclose(oc.apply(svd.qc[:, 2]), 0.0, atol=1e-14)

    def test_zero_width(self):
        oc, _ = build_complement(np.random.default_rng(9).normal(size=(10, 3)))
        assert oc.apply(np.empty((10, 0))).shape == (7, 0)


class TestIdentities:
    @given(arrays(float, st.integers(2, 40), elements=st.floats(0.05, 20)), st.data())
    @settings(max_examples=50, deadline=None)
    def test_scaled_centering(self, d, data):
        # sqrt(D) H^T H sqrt(D) = D - d^{1/2} d^{1/2 T} / k
        v = data.draw(arrays(float, d.size, elements=st.floats(-10, 10)))
        op = HelmertOperator(d.size)
        r = np.sqrt(d)
        lhs = r * op.apply_t(op.apply(r * v))
        rhs = d * v - r * (r @ v) / d.size
        np.testing.assert_allclose(lhs, rhs, atol=1e-10 * (1 + np.abs(d * v).max()))

    @pytest.mark.parametrize("seed", range(3))
    def test_matrix_lemmas(self, seed):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(6, 3))
        C = np.diag(rng.uniform(0.5, 2.0, 3))
        D = np.diag(rng.uniform(0.5, 2.0, 6))
        Di, Ci = np.linalg.inv(D), np.linalg.inv(C)
        # push-through
        np.testing.assert_allclose(np.linalg.inv(np.eye(3) + A.T @ A) @ A.T,
                                   A.T @ np.linalg.inv(np.eye(6) + A @ A.T), atol=1e-10)
        # Woodbury
        lhs = np.linalg.inv(D + A @ C @ A.T)
        rhs = Di - Di @ A @ np.linalg.inv(Ci + A.T @ Di @ A) @ A.T @ Di
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)
        # determinant lemma
        _, l1 = np.linalg.slogdet(D + A @ C @ A.T)
        _, l2 = np.linalg.slogdet(Ci + A.T @ Di @ A)
        assert l1 == pytest.approx(l2 + np.linalg.slogdet(C)[1] + np.linalg.slogdet(D)[1],
                                   abs=1e-10)
