from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import block_ldu_deviation, discarded_energy, eigh_spectrum, q_kahan, skip_block_max
from skipcat.errors import (
    DomainError,
    IllConditionedBlockError,
    RankDeficiencyError,
    SvdConvergenceError,
)
from skipcat.linalg import (
    LowRankPair,
    Permutation,
    PermutedSkipFactors,
    as_matrix,
    schur_complement,
    schur_identity_check,
    skip_forward,
    skip_transform,
    strong_rrqr,
    svd,
    truncated_svd,
)
from skipcat.precision import Arithmetic, FlopCounter


def test_as_matrix_rejects_non_finite():
    with pytest.raises(DomainError, match="NaN or Inf"):
        as_matrix([[1.0, np.nan]])
    with pytest.raises(DomainError):
        as_matrix([1.0, 2.0])


class TestSvd:
    def test_identity_full_rank(self):
        pair = truncated_svd(np.eye(4), 4)
        assert np.abs(pair.dense() - np.eye(4)).max() <= 1e-12

    def test_diag_discards_smallest(self):
        pair = truncated_svd(np.diag([3.0, 2.0, 1.0]), 2)
        assert np.linalg.norm(np.diag([3.0, 2.0, 1.0]) - pair.dense()) == pytest.approx(1.0, abs=1e-12)

    def test_seeded_8x8_matches_eigh_oracle(self):
        W = np.random.default_rng(8).standard_normal((8, 8))
        pair = truncated_svd(W, 4)
        assert abs(np.linalg.norm(W - pair.dense()) - discarded_energy(W, 4)) <= 1e-10

    def test_factor_layout(self):
        W = np.random.default_rng(1).standard_normal((6, 5))
        res = svd(W)
        pair = truncated_svd(W, 3)
        s = np.sqrt(res.singular_values[:3])
        # B = U_r sqrt(S), A = sqrt(S) V_r^T
        assert np.allclose(pair.B, res.U[:, :3] * s)
        assert np.allclose(pair.A, s[:, None] * res.Vt[:3])

    def test_orthonormality_and_order(self):
        W = np.random.default_rng(2).standard_normal((9, 7))
        res = svd(W)
        assert np.all(np.diff(res.singular_values) <= 0)
        assert np.abs(res.U.T @ res.U - np.eye(7)).max() <= 1e-8
        assert np.abs(res.Vt @ res.Vt.T - np.eye(7)).max() <= 1e-8
        assert np.allclose(res.singular_values, eigh_spectrum(W), atol=1e-10)

    @pytest.mark.parametrize("r", [0, 5])
    def test_rank_out_of_range(self, r):
        with pytest.raises(DomainError):
            truncated_svd(np.ones((4, 3)), r)

    def test_nonconvergence_names_matrix(self, monkeypatch):
        def boom(*a, **k):
            raise np.linalg.LinAlgError("SVD did not converge")

        monkeypatch.setattr(np.linalg, "svd", boom)
        with pytest.raises(SvdConvergenceError, match="W_qkv"):
            truncated_svd(np.eye(3), 2, name="W_qkv")


class TestPermutation:
    def test_rejects_non_bijection(self):
        with pytest.raises(DomainError):
            Permutation([0, 0, 1])
        with pytest.raises(DomainError):
            Permutation([0, 3])

    @given(st.permutations(list(range(12))), st.integers(0, 2**31 - 1))
    def test_round_trip(self, idx, seed):
        p = Permutation(idx)
        x = np.random.default_rng(seed).standard_normal(12)
        assert np.array_equal(p.unapply(p.apply(x)), x)
        assert np.array_equal(p.inverse().apply(p.apply(x)), x)

    def test_apply_is_transpose_product(self):
        idx = [2, 0, 3, 1]
        P = np.eye(4)[:, idx]
        x = np.arange(4.0) + 1
        assert np.array_equal(Permutation(idx).apply(x), P.T @ x)


class TestStrongRrqr:
    def test_identity_block_leaves_order(self):
        A = np.hstack([np.eye(2), np.zeros((2, 2))])
        p = strong_rrqr(A, 2.0)
        assert p.is_identity
        assert skip_block_max(A, p.indices) == 0.0

    def test_single_row_picks_largest(self):
        A = np.array([[1e-8, 0.5, 1.0, 0.2]])
        assert strong_rrqr(A).indices[0] == 2

    def test_kahan_16x64_bound_in_high_precision(self):
        A = q_kahan(16, 64, seed=0)
        assert skip_block_max(A, np.arange(64)) > 2.0  # natural order violates the bound
        p = strong_rrqr(A, 2.0)
        assert skip_block_max(A, p.indices, dps=50) <= 2.0

    @pytest.mark.parametrize("f", [1.0, 1.5, 4.0])
    def test_bound_respects_f(self, f):
        A = np.random.default_rng(3).standard_normal((8, 40))
        p = strong_rrqr(A, f)
        assert skip_block_max(A, p.indices) <= f * (1 + 1e-9)

    def test_rank_deficient(self):
        A = np.random.default_rng(0).standard_normal((3, 10))
        A[2] = A[0] + A[1]
        with pytest.raises(RankDeficiencyError):
            strong_rrqr(A)

    def test_bad_inputs(self):
        with pytest.raises(DomainError):
            strong_rrqr(np.ones((4, 3)))
        with pytest.raises(DomainError):
            strong_rrqr(np.eye(2), f=0.5)

    def test_deterministic_ties(self):
        A = np.ones((1, 5))
        assert strong_rrqr(A).indices.tolist() == [0, 1, 2, 3, 4]


class TestSkip:
    def test_full_rank_identity(self):
        fac = skip_transform(truncated_svd(np.eye(4), 4), Permutation.identity(4))
        assert fac.A_prime.shape == (4, 0)
        for e in np.eye(4):
            assert np.abs(skip_forward(fac, e) - e).max() <= 1e-12

    def test_zero_skip_block(self):
        fac = PermutedSkipFactors(np.eye(2), np.zeros((2, 2)), Permutation.identity(4))
        assert skip_forward(fac, np.array([1.0, 2, 3, 4])).tolist() == [1.0, 2.0]

    def test_hand_evaluable(self):
        fac = PermutedSkipFactors(np.eye(2), np.eye(2), Permutation.identity(4))
        assert skip_forward(fac, np.array([1.0, 2, 3, 4])).tolist() == [4.0, 6.0]

    def test_seeded_8x8_equivalence_and_truncation(self):
        rng = np.random.default_rng(88)
        W = rng.standard_normal((8, 8))
        pair = truncated_svd(W, 4)
        fac = skip_transform(pair, strong_rrqr(pair.A))
        X = rng.standard_normal((8, 100))
        ref = pair.B @ (pair.A @ X)
        got = skip_forward(fac, X)
        err = np.linalg.norm(got - ref, axis=0) / np.linalg.norm(ref, axis=0)
        assert err.max() <= 1e-12
        # against the dense product: bounded by the discarded spectrum
        sigma5 = eigh_spectrum(W)[4]
        dense_err = np.linalg.norm(got - W @ X, axis=0)
        assert np.all(dense_err <= sigma5 * np.linalg.norm(X, axis=0) * (1 + 1e-10))

    def test_llama_shaped_param_count(self):
        rng = np.random.default_rng(0)
        r, d = 1024, 4096
        pair = LowRankPair(rng.standard_normal((d, r)), np.hstack([np.eye(r), rng.standard_normal((r, d - r))]))
        fac = skip_transform(pair, Permutation.identity(d))
        assert fac.param_count == 7_340_032 == 1024 * (4096 + 4096 - 1024)

    def test_refuses_singular_leading_block(self):
        A = np.array([[0.0, 1.0, 2.0], [0.0, 3.0, 1.0]])
        pair = LowRankPair(np.eye(2), A)
        with pytest.raises(IllConditionedBlockError, match="permutation"):
            skip_transform(pair, Permutation.identity(3))
        fac = skip_transform(pair, strong_rrqr(A))
        x = np.array([1.0, -2.0, 0.5])
        assert np.allclose(skip_forward(fac, x), A @ x, rtol=1e-12)

    def test_perm_length_mismatch(self):
        pair = truncated_svd(np.eye(4), 2)
        with pytest.raises(DomainError):
            skip_transform(pair, Permutation.identity(3))

    def test_input_dimension_mismatch(self):
        fac = skip_transform(truncated_svd(np.eye(4), 2), Permutation.identity(4))
        with pytest.raises(DomainError):
            skip_forward(fac, np.ones(5))

    @pytest.mark.parametrize("d_in,d_out,r", [(8, 8, 4), (16, 5, 3), (6, 12, 6)])
    def test_flop_count(self, d_in, d_out, r):
        rng = np.random.default_rng(d_in + d_out + r)
        pair = truncated_svd(rng.standard_normal((d_out, d_in)), r)
        fac = skip_transform(pair, strong_rrqr(pair.A))
        counter = FlopCounter()
        skip_forward(fac, rng.standard_normal(d_in), Arithmetic("fp64", counter))
        add = r if d_in > r else 0
        assert counter.total == 2 * r * (d_in + d_out - r) + add

    def test_dense_reassembly(self):
        rng = np.random.default_rng(5)
        pair = truncated_svd(rng.standard_normal((7, 9)), 4)
        fac = skip_transform(pair, strong_rrqr(pair.A))
        assert np.allclose(fac.dense(), pair.dense(), atol=1e-12)


class TestSchur:
    def test_identity(self):
        assert schur_identity_check(np.eye(4), 2) == 0.0
        assert np.array_equal(schur_complement(np.eye(4), 2), np.eye(2))

    def test_hand_computed(self):
        A = np.array([[2, 0, 1, 0], [0, 2, 0, 1], [1, 0, 2, 0], [0, 1, 0, 2]], dtype=float)
        D = schur_complement(A, 2)
        assert np.allclose(D, np.diag([1.5, 1.5]), atol=1e-15)
        D_oracle, _ = block_ldu_deviation(A, 2)
        assert np.allclose(D, D_oracle, atol=1e-15)
        assert schur_identity_check(A, 2) <= 1e-14

    def test_random_well_conditioned(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            A = rng.standard_normal((6, 6))
            A[:3, :3] = np.eye(3) * 3 + 0.3 * rng.standard_normal((3, 3))
            assert np.linalg.cond(A[:3, :3]) <= 10
            assert schur_identity_check(A, 3) <= 1e-12

    def test_singular_leading_block(self):
        A = np.eye(4)
        A[0, 0] = 0.0
        with pytest.raises(IllConditionedBlockError):
            schur_identity_check(A, 2)

    def test_non_square(self):
        with pytest.raises(DomainError):
            schur_identity_check(np.ones((3, 4)), 1)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 12),
    st.integers(1, 12),
    st.integers(1, 12),
    st.integers(0, 2**31 - 1),
)
def test_skip_is_exact_rewrite(d_out, d_in, r, seed):
    r = min(r, d_in, d_out)
    rng = np.random.default_rng(seed)
    pair = LowRankPair(rng.standard_normal((d_out, r)), rng.standard_normal((r, d_in)))
    fac = skip_transform(pair, strong_rrqr(pair.A))
    x = rng.standard_normal(d_in)
    ref = pair.B @ (pair.A @ x)
    assert np.linalg.norm(skip_forward(fac, x) - ref) <= 1e-10 * max(np.linalg.norm(ref), 1e-300)
