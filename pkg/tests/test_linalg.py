import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcclab.linalg import SeededRng, frobenius_norm, inner_product, matmul, row_mean, svd, transpose


def test_rng_reference_vectors():
    # published SplitMix64 outputs
    assert int(SeededRng(0).next_u64(1)[0]) == 0xE220A8397B1DCDAF
    assert [int(x) for x in SeededRng(1234567).next_u64(3)] == [
        6457827717110365317, 3203168211198807973, 9817491932198370423]


def test_rng_is_counter_based():
    a = SeededRng(7)
    first = a.next_u64(2)
    second = a.next_u64(3)
    assert np.array_equal(np.concatenate([first, second]), SeededRng(7).next_u64(5))


def test_uniform_in_unit_interval():
    u = SeededRng(3).uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.02


def test_uniform_range_bounds():
    u = SeededRng(4).uniform_range((50, 3), -2.0, 5.0)
    assert u.shape == (50, 3)
    assert u.min() >= -2.0 and u.max() < 5.0


def test_normal_moments():
    z = SeededRng(11).normal(20000)
    assert np.all(np.isfinite(z))
    assert abs(z.mean()) < 0.03
    assert abs(z.std() - 1.0) < 0.03


def test_normal_matrix_deterministic():
    assert np.array_equal(SeededRng(5).normal_matrix(4, 3), SeededRng(5).normal_matrix(4, 3))
    assert not np.array_equal(SeededRng(5).normal_matrix(4, 3), SeededRng(6).normal_matrix(4, 3))


def _check_svd(m):
    res = svd(m)
    k = min(m.shape)
    assert res.u.shape == (m.shape[0], k)
    assert res.v.shape == (m.shape[1], k)
    assert np.all(np.diff(res.sigma) <= 0) and np.all(res.sigma >= 0)
    scale = max(1.0, np.abs(m).max())
    assert np.allclose(res.reconstruct(), m, atol=1e-10 * scale)
    assert np.allclose(res.u.T @ res.u, np.eye(k), atol=1e-10)
    assert np.allclose(res.v.T @ res.v, np.eye(k), atol=1e-10)
    assert np.allclose(res.sigma, np.linalg.svd(m, compute_uv=False), atol=1e-10 * scale)
    return res


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**32))
def test_svd_matches_numpy_oracle(rows, cols, seed):
    _check_svd(SeededRng(seed).normal_matrix(rows, cols))


def test_svd_square_32():
    _check_svd(SeededRng(99).normal_matrix(32, 32))


def test_svd_rank_deficient_completes_basis():
    rng = SeededRng(1)
    m = rng.normal_matrix(6, 2) @ rng.normal_matrix(2, 6)
    res = _check_svd(m)
    assert np.all(res.sigma[2:] == 0.0)


def test_svd_zero_matrix():
    res = svd(np.zeros((3, 3)))
    assert np.all(res.sigma == 0.0)
    assert np.allclose(res.u.T @ res.u, np.eye(3))


def test_svd_sign_rule():
    res = svd(SeededRng(2).normal_matrix(5, 5))
    for j in range(5):
        col = res.u[:, j]
        assert col[np.argmax(np.abs(col))] >= 0.0


def test_svd_deterministic():
    m = SeededRng(8).normal_matrix(7, 7)
    a, b = svd(m), svd(m)
    assert a.u.tobytes() == b.u.tobytes() and a.sigma.tobytes() == b.sigma.tobytes()


def test_svd_rejects_non_finite():
    m = np.eye(3)
    m[1, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        svd(m)


def test_helpers():
    a = SeededRng(1).normal_matrix(4, 3)
    b = SeededRng(2).normal_matrix(3, 5)
    assert np.allclose(matmul(a, b), a @ b)
    assert np.array_equal(transpose(a), a.T)
    assert np.isclose(frobenius_norm(a), np.linalg.norm(a))
    assert np.allclose(row_mean(a), a.mean(axis=0))
    assert np.isclose(inner_product(a, a), np.sum(a * a))
    with pytest.raises(ValueError):
        matmul(a, a)
