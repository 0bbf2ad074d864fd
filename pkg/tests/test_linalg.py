import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smf.linalg import (
    LinalgError,
    frobenius_norm,
    least_squares,
    numerical_rank_ratio,
    operator_norm,
    orthonormal_basis,
    project_onto_factor_subspace,
    rank_projection,
    read_csv_matrix,
    truncated_svd,
    write_csv_matrix,
)


class TestNorms:
    def test_frobenius_examples(self):
        assert frobenius_norm(np.eye(2)) == pytest.approx(np.sqrt(2))
        assert frobenius_norm(np.zeros((3, 4))) == 0.0
        assert frobenius_norm([[3, 0], [0, 4]]) == pytest.approx(5.0)

    def test_operator_examples(self):
        assert operator_norm([[3, 0], [0, 4]]) == pytest.approx(4.0)
        assert operator_norm(np.eye(7)) == pytest.approx(1.0)

    def test_operator_matches_full_svd(self):
        rng = np.random.default_rng(0)
        m = rng.standard_normal((5, 3))
        assert abs(operator_norm(m) - np.linalg.svd(m, compute_uv=False)[0]) < 1e-8


class TestTruncatedSvd:
    def test_diagonal(self):
        svd = truncated_svd(np.diag([3.0, 1.0]), 1)
        np.testing.assert_allclose(svd.s, [3.0])
        np.testing.assert_allclose(svd.reconstruct(), np.diag([3.0, 0.0]), atol=1e-12)

    def test_full_rank_reconstruction(self):
        m = np.random.default_rng(1).standard_normal((7, 4))
        assert np.linalg.norm(truncated_svd(m, 4).reconstruct() - m) < 1e-8

    def test_known_rank_input(self):
        rng = np.random.default_rng(2)
        m = rng.standard_normal((8, 2)) @ rng.standard_normal((2, 6))
        assert np.linalg.norm(truncated_svd(m, 2).reconstruct() - m) < 1e-8

    @pytest.mark.parametrize("method", ["exact", "krylov", "randomized"])
    def test_methods_agree_on_large_matrix(self, method):
        rng = np.random.default_rng(3)
        m = rng.standard_normal((200, 5)) @ rng.standard_normal((5, 150)) * 3
        m += 0.01 * rng.standard_normal(m.shape)
        ref = np.linalg.svd(m, compute_uv=False)[:3]
        svd = truncated_svd(m, 3, method=method)
        np.testing.assert_allclose(svd.s, ref, rtol=1e-6)

    def test_auto_uses_krylov_above_threshold(self):
        rng = np.random.default_rng(4)
        m = rng.standard_normal((300, 120))
        a, b = truncated_svd(m, 2), truncated_svd(m, 2, method="exact")
        np.testing.assert_allclose(a.s, b.s, rtol=1e-10)
        np.testing.assert_allclose(a.reconstruct(), b.reconstruct(), atol=1e-8)

    def test_deterministic(self):
        m = np.random.default_rng(5).standard_normal((120, 90))
        for method in ("krylov", "randomized", "auto"):
            a, b = truncated_svd(m, 3, method=method), truncated_svd(m, 3, method=method)
            np.testing.assert_array_equal(a.u, b.u)
            np.testing.assert_array_equal(a.s, b.s)

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(LinalgError):
            truncated_svd(np.ones((3, 5)), k)

    def test_non_finite_rejected(self):
        m = np.ones((3, 3))
        m[1, 1] = np.nan
        with pytest.raises(LinalgError):
            truncated_svd(m, 1)

    def test_unknown_method(self):
        with pytest.raises(LinalgError):
            truncated_svd(np.eye(3), 1, method="qr")


class TestRankProjection:
    def test_diagonal(self):
        np.testing.assert_allclose(rank_projection(np.diag([3.0, 1.0]), 1), np.diag([3.0, 0.0]),
                                   atol=1e-12)

    def test_already_feasible(self):
        m = np.outer([1.0, 2.0, 3.0], [1.0, -1.0])
        np.testing.assert_array_equal(rank_projection(m, 2), m)

    def test_error_matches_tail_singular_values(self):
        m = np.random.default_rng(6).standard_normal((6, 6))
        s = np.linalg.svd(m, compute_uv=False)
        err = np.linalg.norm(m - rank_projection(m, 3))
        assert abs(err - np.sqrt(np.sum(s[3:] ** 2))) < 1e-8

    def test_rank_must_be_positive(self):
        with pytest.raises(LinalgError):
            rank_projection(np.eye(3), 0)

    def test_rank_ratio(self):
        assert numerical_rank_ratio(np.diag([2.0, 1.0, 0.0]), 1) == pytest.approx(0.5)
        assert numerical_rank_ratio(np.eye(2), 3) == 0.0


class TestEckartYoungProperty:
    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), r=st.integers(1, 4))
    def test_projection_beats_random_rank_r(self, seed, r):
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((7, 6))
        best = np.linalg.norm(m - rank_projection(m, r))
        for _ in range(20):
            q = rng.standard_normal((7, r)) @ rng.standard_normal((r, 6))
            assert best <= np.linalg.norm(m - q) + 1e-12


class TestFactorSubspace:
    def test_projection_factors_through_rank_projection(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            y = rng.standard_normal((9, 8))
            r = int(rng.integers(1, 4))
            x = rank_projection(y, r, method="exact")
            svd = truncated_svd(y, r, method="exact")
            u_bar = orthonormal_basis(np.hstack([svd.u, rng.standard_normal((9, 2))]))
            v_bar = orthonormal_basis(np.hstack([svd.vt.T, rng.standard_normal((8, 3))]))
            proj = project_onto_factor_subspace(y, u_bar, v_bar)
            assert np.linalg.norm(rank_projection(proj, r, method="exact") - x) < 1e-8

    def test_orthonormal_basis_drops_dependent_columns(self):
        m = np.column_stack([[1.0, 0, 0], [2.0, 0, 0], [0, 1.0, 0]])
        q = orthonormal_basis(m)
        assert q.shape == (3, 2)
        np.testing.assert_allclose(q.T @ q, np.eye(2), atol=1e-12)


class TestLeastSquares:
    def test_identity(self):
        b = np.random.default_rng(8).standard_normal((4, 3))
        np.testing.assert_allclose(least_squares(np.eye(4), b), b, atol=1e-12)

    def test_orthonormal_exact_recovery(self):
        rng = np.random.default_rng(9)
        a, _ = np.linalg.qr(rng.standard_normal((10, 3)))
        x0 = rng.standard_normal((3, 2))
        np.testing.assert_allclose(least_squares(a, a @ x0), x0, atol=1e-10)

    def test_residual_orthogonal(self):
        rng = np.random.default_rng(10)
        a, b = rng.standard_normal((20, 4)), rng.standard_normal(20)
        x = least_squares(a, b)
        assert x.shape == (4,)
        assert np.linalg.norm(a.T @ (b - a @ x)) < 1e-8

    def test_rank_deficient(self):
        a = np.column_stack([np.ones(5), 2 * np.ones(5)])
        with pytest.raises(LinalgError, match="rank deficient"):
            least_squares(a, np.ones(5))

    def test_underdetermined(self):
        with pytest.raises(LinalgError, match="rank deficient"):
            least_squares(np.ones((2, 3)), np.ones(2))


class TestCsv:
    def test_roundtrip_is_exact(self, tmp_path):
        m = np.random.default_rng(11).standard_normal((4, 3))
        write_csv_matrix(tmp_path / "m.csv", m)
        np.testing.assert_array_equal(read_csv_matrix(tmp_path / "m.csv"), m)

    def test_ragged_rejected(self, tmp_path):
        (tmp_path / "r.csv").write_text("1,2\n3\n")
        with pytest.raises(LinalgError, match="ragged"):
            read_csv_matrix(tmp_path / "r.csv")

    def test_non_finite_rejected(self, tmp_path):
        (tmp_path / "n.csv").write_text("1,nan\n")
        with pytest.raises(LinalgError):
            read_csv_matrix(tmp_path / "n.csv")

    def test_garbage_rejected(self, tmp_path):
        (tmp_path / "g.csv").write_text("1,abc\n")
        with pytest.raises(LinalgError):
            read_csv_matrix(tmp_path / "g.csv")
