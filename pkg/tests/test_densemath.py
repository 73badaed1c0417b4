import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phantomgrad import densemath as dm
from phantomgrad.errors import ShapeError, SingularMatrixError, ZeroVectorError

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def sym_with_spectrum(mu, seed=0):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((len(mu), len(mu))))
    return q @ np.diag(mu) @ q.T


def test_matvec_identity():
    assert np.array_equal(dm.matvec(np.eye(2), [3.0, 4.0]), [3.0, 4.0])


def test_dot_orthogonal():
    assert dm.dot([1.0, 0.0], [0.0, 1.0]) == 0.0


def test_gemm_diagonal():
    assert np.array_equal(dm.gemm(np.diag([2.0, 3.0]), np.diag([4.0, 5.0])), np.diag([8.0, 15.0]))


def test_axpy_norms_transpose():
    assert np.array_equal(dm.axpy(2.0, [1.0, 1.0], [0.0, 1.0]), [2.0, 3.0])
    assert dm.norm2([3.0, 4.0]) == 5.0
    assert dm.norm1([-1.0, 2.0]) == 3.0
    assert np.array_equal(dm.transpose([[1.0, 2.0]]), [[1.0], [2.0]])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError) as exc:
        dm.gemm(np.ones((2, 3)), np.ones((2, 3)))
    assert "(2, 3)" in str(exc.value)
    with pytest.raises(ShapeError):
        dm.matvec(np.ones((2, 2)), np.ones(3))
    with pytest.raises(ShapeError):
        dm.dot(np.ones(2), np.ones(3))


def test_power_sigma_diag():
    r = dm.power_iteration_sigma(np.diag([2.0, 1.0]), 1000, 1e-14)
    assert abs(r.estimate - 2.0) < 1e-8


def test_power_sigma_identity_one_iteration():
    r = dm.power_iteration_sigma(np.eye(4))
    assert r.estimate == 1.0 and r.iters == 1


def test_power_sigma_known_spectrum():
    mu = np.array([0.9, -0.7, 0.5, 0.3, 0.2, -0.1, 0.05, 0.01])
    r = dm.power_iteration_sigma(sym_with_spectrum(mu), 5000, 1e-14)
    assert abs(r.estimate - 0.9) < 1e-6


def test_power_sigma_zero_matrix():
    r = dm.power_iteration_sigma(np.zeros((3, 3)))
    assert r.estimate == 0.0 and r.iters == 0


def test_power_rho_diag():
    assert abs(dm.power_iteration_rho(np.diag([0.9, 0.5])).estimate - 0.9) < 1e-8


def test_power_rho_nilpotent_flagged():
    r = dm.power_iteration_rho(np.array([[0.0, 1.0], [0.0, 0.0]]))
    assert not r.converged


def test_power_rho_constructed_spectrum():
    r = dm.power_iteration_rho(sym_with_spectrum(np.array([0.75, -0.3])), 5000, 1e-14)
    assert abs(r.estimate - 0.75) < 1e-6


@pytest.mark.parametrize("m, expected", [
    (np.diag([3.0, 1.0]), (3.0, 1.0, 3.0)),
    (np.eye(5), (1.0, 1.0, 1.0)),
    (np.diag([2.0, 1.0, 0.5]), (2.0, 0.5, 4.0)),
])
def test_svd_extremes(m, expected):
    assert np.allclose(dm.svd_extremes(m), expected, rtol=1e-12)


def test_svd_singular_kappa_inf():
    assert dm.svd_extremes(np.diag([1.0, 0.0]))[2] == float("inf")


def test_dense_inverse_examples():
    assert np.allclose(dm.dense_inverse(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]), atol=0)
    assert np.allclose(dm.dense_inverse(np.eye(2) - 0.5 * np.eye(2)), 2 * np.eye(2), atol=0)


def test_dense_inverse_random_residual():
    rng = np.random.default_rng(3)
    m = rng.standard_normal((8, 8)) + 4 * np.eye(8)
    assert np.abs(m @ dm.dense_inverse(m) - np.eye(8)).max() <= 1e-10


def test_dense_inverse_matches_numpy_oracle():
    m = np.random.default_rng(4).standard_normal((12, 12))
    assert np.allclose(dm.dense_inverse(m), np.linalg.inv(m), rtol=1e-9, atol=1e-11)


def test_dense_inverse_singular():
    with pytest.raises(SingularMatrixError):
        dm.dense_inverse(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_dense_inverse_kappa_1e8():
    q, _ = np.linalg.qr(np.random.default_rng(5).standard_normal((6, 6)))
    m = q @ np.diag(np.logspace(0, -8, 6)) @ q.T
    assert np.abs(m @ dm.dense_inverse(m) - np.eye(6)).max() <= 1e-8


def test_cosine_examples():
    g = np.array([1.0, -2.0, 3.0])
    assert dm.cosine_similarity(g, g) == pytest.approx(1.0, abs=1e-15)
    assert dm.cosine_similarity(g, -g) == pytest.approx(-1.0, abs=1e-15)
    assert dm.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    with pytest.raises(ZeroVectorError):
        dm.cosine_similarity([0.0, 0.0], [1.0, 0.0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 4), elements=finite))
def test_prop_power_sigma_below_frobenius(m):
    r = dm.power_iteration_sigma(m, 200, 1e-10)
    assert r.estimate <= np.linalg.norm(m) * (1 + 1e-12) + 1e-300


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 10))
def test_prop_double_inverse(seed, n):
    rng = np.random.default_rng(seed)
    q1, _ = np.linalg.qr(rng.standard_normal((n, n)))
    q2, _ = np.linalg.qr(rng.standard_normal((n, n)))
    m = q1 @ np.diag(np.logspace(0, -4, n)) @ q2
    assert np.abs(dm.dense_inverse(dm.dense_inverse(m)) - m).max() <= 1e-8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_prop_orthogonal_svd(seed, n):
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n, n)))
    assert np.allclose(dm.svd_extremes(q), (1.0, 1.0, 1.0), atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_prop_cosine_scale_invariant(a, b, alpha, beta):
    if not a.any() or not b.any():
        return
    assert abs(dm.cosine_similarity(alpha * a, beta * b) - dm.cosine_similarity(a, b)) <= 1e-12


def test_cosine_propagates_nan():
    assert np.isnan(dm.cosine_similarity([np.nan, 1.0], [1.0, 1.0]))
