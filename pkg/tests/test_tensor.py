import numpy as np
import pytest
from hypothesis import given, strategies as st

from tuckerconv.tensor import (TuckerFactors, fold, mode_n_matricize, relative_error,
                               truncated_svd, tucker2_decompose, tucker2_reconstruct)

import oracles

dims4 = st.tuples(*[st.integers(1, 4)] * 4)


def rand_tensor(draw_dims, seed=0):
    return np.random.default_rng(seed).standard_normal(draw_dims)


# ---- matricization

def test_mode0_of_kernel_shape():
    m = mode_n_matricize(np.zeros((64, 64, 3, 3)), 0)
    assert m.shape == (64, 576)


def test_zero_tensor_gives_zero_matrix():
    for mode in range(4):
        m = mode_n_matricize(np.zeros((2, 3, 4, 5)), mode)
        assert not m.any()
        assert m.shape[0] == (2, 3, 4, 5)[mode]


def test_mode1_hand_case():
    t = np.array([1.0, 2, 3, 4]).reshape(2, 2, 1, 1)
    np.testing.assert_array_equal(mode_n_matricize(t, 1), [[1, 3], [2, 4]])


def test_bad_mode():
    with pytest.raises(ValueError):
        mode_n_matricize(np.zeros((2, 2, 2, 2)), 4)


@given(dims4, st.integers(0, 3), st.integers(0, 2**16))
def test_matricize_matches_index_map(dims, mode, seed):
    t = rand_tensor(dims, seed)
    np.testing.assert_array_equal(mode_n_matricize(t, mode), oracles.unfold(t, mode))


@given(dims4, st.integers(0, 3), st.integers(0, 2**16))
def test_fold_round_trip_exact(dims, mode, seed):
    t = rand_tensor(dims, seed)
    np.testing.assert_array_equal(fold(mode_n_matricize(t, mode), mode, dims), t)


# ---- truncated SVD

def test_svd_identity():
    _, s, _ = truncated_svd(np.eye(3), 3)
    np.testing.assert_allclose(s, [1, 1, 1])


def test_svd_rank_one():
    rng = np.random.default_rng(0)
    a = rng.standard_normal(4)
    b = rng.standard_normal(5)
    a *= 2 / np.linalg.norm(a)
    b *= 3 / np.linalg.norm(b)
    m = np.outer(a, b)
    u, s, v = truncated_svd(m, 1)
    np.testing.assert_allclose(s, [6.0])
    assert np.linalg.norm(m - (u * s) @ v.T) < 1e-12


def test_svd_residual_matches_eigen_oracle():
    m = np.random.default_rng(5).standard_normal((5, 7))
    u, s, v = truncated_svd(m, 2)
    resid = np.linalg.norm(m - (u * s) @ v.T)
    sv = oracles.singular_values_eig(m)
    assert resid == pytest.approx(np.sqrt(np.sum(sv[2:5] ** 2)), rel=1e-10)


@pytest.mark.parametrize("k", [0, 6])
def test_svd_rank_out_of_range(k):
    with pytest.raises(ValueError):
        truncated_svd(np.ones((5, 7)), k)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**16), st.data())
def test_svd_orthonormal_descending(rows, cols, seed, data):
    k = data.draw(st.integers(1, min(rows, cols)))
    m = rand_tensor((rows, cols), seed)
    u, s, v = truncated_svd(m, k)
    np.testing.assert_allclose(u.T @ u, np.eye(k), atol=1e-6)
    np.testing.assert_allclose(v.T @ v, np.eye(k), atol=1e-6)
    assert np.all(np.diff(s) <= 1e-12) and np.all(s >= 0)
    # sign convention: first nonzero entry of each left vector nonnegative
    for j in range(k):
        nz = u[np.abs(u[:, j]) > 0, j]
        assert nz.size == 0 or nz[0] >= 0


# ---- Tucker-2

def test_separable_kernel_rank_one():
    rng = np.random.default_rng(2)
    a, b, g = rng.standard_normal(5), rng.standard_normal(4), rng.standard_normal((3, 3))
    k = np.einsum("c,n,rs->cnrs", a, b, g)
    f = tucker2_decompose(k, 1, 1)
    assert relative_error(k, tucker2_reconstruct(f)) < 1e-6


def test_full_rank_exact():
    k = np.random.default_rng(3).standard_normal((6, 5, 3, 3))
    f = tucker2_decompose(k, 6, 5)
    assert relative_error(k, tucker2_reconstruct(f)) <= 1e-5


def test_truncated_error_within_tail_bound():
    k = np.random.default_rng(4).standard_normal((4, 4, 3, 3))
    err = relative_error(k, tucker2_reconstruct(tucker2_decompose(k, 2, 2)))
    assert err <= oracles.tucker2_tail_bound(k, 2, 2) + 1e-12


def test_core_definition():
    k = np.random.default_rng(6).standard_normal((4, 3, 2, 2))
    f = tucker2_decompose(k, 2, 2)
    core = np.zeros((2, 2, 2, 2))
    for a in range(2):
        for b in range(2):
            for c in range(4):
                for n in range(3):
                    core[a, b] += f.u1[c, a] * f.u2[n, b] * k[c, n]
    np.testing.assert_allclose(f.core, core, atol=1e-12)


def test_reconstruct_hand_case():
    u1 = np.array([[1.0, 2.0], [3.0, 4.0]])
    u2 = np.array([[5.0], [6.0]])
    core = np.array([7.0, 8.0]).reshape(2, 1, 1, 1)
    k = tucker2_reconstruct(TuckerFactors(u1, u2, core))
    # k[c,n] = sum_a core[a] u1[c,a] u2[n]
    expected = np.array([[(1 * 7 + 2 * 8) * 5, (1 * 7 + 2 * 8) * 6],
                         [(3 * 7 + 4 * 8) * 5, (3 * 7 + 4 * 8) * 6]])
    np.testing.assert_allclose(k[:, :, 0, 0], expected)


def test_zero_core_zero_tensor():
    f = TuckerFactors(np.eye(3)[:, :2], np.eye(2), np.zeros((2, 2, 3, 3)))
    assert not tucker2_reconstruct(f).any()


@pytest.mark.parametrize("d1,d2", [(0, 1), (1, 0), (5, 1), (1, 4)])
def test_rank_bounds(d1, d2):
    with pytest.raises(ValueError):
        tucker2_decompose(np.ones((4, 3, 3, 3)), d1, d2)


def test_factor_shape_mismatch():
    with pytest.raises(ValueError):
        TuckerFactors(np.eye(3)[:, :2], np.eye(2), np.zeros((3, 2, 3, 3)))


def test_relative_error_cases():
    a = np.array([3.0, 4.0, 0.0, 0.0]).reshape(1, 1, 2, 2)
    assert relative_error(a, a) == 0
    assert relative_error(a, np.zeros_like(a)) == 1
    assert relative_error(a, 2 * a) == 1
    with pytest.raises(ValueError):
        relative_error(np.zeros_like(a), a)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**16))
def test_factor_orthonormality_and_full_rank(c, n, seed):
    k = rand_tensor((c, n, 3, 3), seed)
    f = tucker2_decompose(k, c, n)
    np.testing.assert_allclose(f.u1.T @ f.u1, np.eye(c), atol=1e-6)
    np.testing.assert_allclose(f.u2.T @ f.u2, np.eye(n), atol=1e-6)
    assert relative_error(k, tucker2_reconstruct(f)) <= 1e-5
    assert np.all(np.isfinite(f.core))


@given(st.integers(2, 5), st.integers(2, 5), st.integers(0, 2**16))
def test_error_non_increasing_in_rank(c, n, seed):
    k = rand_tensor((c, n, 2, 2), seed)
    for d2 in range(1, n + 1):
        errs = [relative_error(k, tucker2_reconstruct(tucker2_decompose(k, d1, d2)))
                for d1 in range(1, c + 1)]
        assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))
    for d1 in range(1, c + 1):
        errs = [relative_error(k, tucker2_reconstruct(tucker2_decompose(k, d1, d2)))
                for d2 in range(1, n + 1)]
        assert all(b <= a + 1e-9 for a, b in zip(errs, errs[1:]))


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**16), st.data())
def test_truncation_error_below_tail_bound(c, n, seed, data):
    d1 = data.draw(st.integers(1, c))
    d2 = data.draw(st.integers(1, n))
    k = rand_tensor((c, n, 3, 3), seed)
    err = relative_error(k, tucker2_reconstruct(tucker2_decompose(k, d1, d2)))
    assert err <= oracles.tucker2_tail_bound(k, d1, d2) + 1e-9
