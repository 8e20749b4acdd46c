import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_corr
from gcr import corr_manifold as cm
from gcr.errors import DomainError, ValidationError


def test_vecl_is_column_major_lower_triangle():
    rows, cols = cm.vecl_indices(4)
    assert list(zip(rows, cols)) == [(1, 0), (2, 0), (3, 0), (2, 1), (3, 1), (3, 2)]
    a = np.arange(16.0).reshape(4, 4)
    assert cm.vecl(a).tolist() == [4, 8, 12, 9, 13, 14]


def test_vecl_inverse_builds_symmetric_matrix():
    v = np.array([0.1, 0.2, 0.3])
    a = cm.vecl_inverse(v, diag=1.0)
    assert np.allclose(a, a.T)
    assert np.allclose(np.diag(a), 1.0)
    assert np.allclose(cm.vecl(a), v)


def test_dim_from_pairs_rejects_non_triangular_lengths():
    assert cm.dim_from_pairs(10) == 5
    with pytest.raises(ValidationError):
        cm.dim_from_pairs(4)


def test_matrix_functions_agree_with_scipy(rng):
    r = random_corr(rng, 5)
    assert np.allclose(cm.sym_matrix_function(r, "log"), scipy.linalg.logm(r).real, atol=1e-12)
    g = cm.vecl_inverse(rng.normal(size=10), 5, diag=rng.normal(size=5))
    assert np.allclose(cm.sym_matrix_function(g, "exp"), scipy.linalg.expm(g), atol=1e-12)
    root = cm.sym_matrix_function(r, "inv_sqrt")
    assert np.allclose(root @ r @ root, np.eye(5), atol=1e-12)


@pytest.mark.parametrize("rho", [-0.95, -0.5, 0.0, 0.5, 0.6, 0.95])
def test_two_by_two_reduces_to_fisher_z(rho):
    r = np.array([[1.0, rho], [rho, 1.0]])
    assert abs(cm.gz_transform(r)[0] - np.arctanh(rho)) < 1e-12
    assert np.allclose(cm.gz_inverse(np.array([np.arctanh(rho)])), r, atol=1e-12)


def test_fisher_z_at_point_six_is_log_two():
    r = np.array([[1.0, 0.6], [0.6, 1.0]])
    assert cm.gz_transform(r)[0] == pytest.approx(np.log(2.0), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(m=st.integers(2, 9), seed=st.integers(0, 2**32 - 1))
def test_round_trip_from_correlation_side(m, seed):
    r = random_corr(np.random.default_rng(seed), m)
    back = cm.gz_inverse(cm.gz_transform(r))
    assert np.max(np.abs(back - r)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(m=st.integers(2, 8), scale=st.floats(0.05, 0.8), seed=st.integers(0, 2**32 - 1))
def test_round_trip_from_gamma_side(m, scale, seed):
    gamma = np.random.default_rng(seed).normal(scale=scale, size=m * (m - 1) // 2)
    r = cm.gz_inverse(gamma)
    assert np.allclose(np.diag(r), 1.0, atol=1e-11)
    assert np.min(np.linalg.eigvalsh(r)) > 0
    assert np.allclose(cm.gz_transform(r), gamma, atol=1e-9)


def test_inverse_reports_iterations_and_contracts():
    r, info = cm.gz_inverse(np.array([0.1, 0.2, 0.3]), return_info=True)
    res = info["residuals"]
    assert res[-1] < cm.FIXED_POINT_TOL
    assert all(b < a for a, b in zip(res, res[1:]))
    assert info["iterations"] == len(res) - 1


def test_inverse_of_empty_vector_is_one_by_one():
    assert cm.gz_inverse(np.array([])).tolist() == [[1.0]]


def test_batch_warm_start_and_newton_agree_with_plain_iteration(rng):
    gamma = rng.normal(scale=0.4, size=(6, 10))
    plain = cm.gz_inverse_batch(gamma, 5)
    polished, info = cm.gz_inverse_batch(gamma, 5, return_info=True, newton=True,
                                         x0=np.full((6, 5), -0.1))
    assert np.allclose(plain, polished, atol=1e-11)
    assert info["iterations"] < 15


def test_inverse_rejects_non_finite():
    with pytest.raises(ValidationError):
        cm.gz_inverse(np.array([np.nan]))


def test_transform_validates_input():
    with pytest.raises(ValidationError):
        cm.gz_transform(np.array([[1.0, 0.2], [0.3, 1.0]]))
    with pytest.raises(ValidationError):
        cm.gz_transform(np.array([[1.0, 0.2], [0.2, 2.0]]))
    with pytest.raises(DomainError):
        cm.gz_transform(np.array([[1.0, 1.0], [1.0, 1.0]]))


def _fd_jacobian(r, h=1e-6):
    gamma = cm.gz_transform(r)
    out = np.empty((gamma.size, gamma.size))
    for k in range(gamma.size):
        e = np.zeros_like(gamma)
        e[k] = h
        out[:, k] = (cm.vecl(cm.gz_inverse(gamma + e)) - cm.vecl(cm.gz_inverse(gamma - e))) / (2 * h)
    return out


@pytest.mark.parametrize("m", [2, 3, 5, 7])
def test_jacobian_matches_finite_differences(rng, m):
    r = random_corr(rng, m)
    jac = cm.jacobian_rho_gamma(r)
    fd = _fd_jacobian(r)
    assert np.max(np.abs(jac - fd)) / np.max(np.abs(fd)) < 1e-6
    assert np.all(np.diag(jac) > 0)


def test_jacobian_for_two_by_two_is_sech_squared():
    rho = 0.37
    jac = cm.jacobian_rho_gamma(np.array([[1.0, rho], [rho, 1.0]]))
    assert jac[0, 0] == pytest.approx(1 - rho**2, rel=1e-12)


def test_jacobian_at_identity_handles_repeated_eigenvalues():
    jac = cm.jacobian_rho_gamma(np.eye(4))
    assert np.allclose(jac, np.eye(6), atol=1e-12)


def test_jvp_batch_matches_full_jacobian(rng):
    rs = np.stack([random_corr(rng, 4) for _ in range(3)])
    dirs = rng.normal(size=(3, 6, 2))
    out = cm.jvp_batch(rs, dirs)
    for b in range(3):
        assert np.allclose(out[b], cm.jacobian_rho_gamma(rs[b]) @ dirs[b], atol=1e-12)


def test_jvp_batch_rejects_singular_matrices():
    with pytest.raises(DomainError):
        cm.jvp_batch(np.ones((1, 3, 3)), np.eye(3)[None])


def test_jacobian_vanishes_towards_the_boundary():
    eps = 1e-9
    r = np.full((3, 3), 1 - eps) + eps * np.eye(3)
    assert np.max(np.abs(cm.jvp_batch(r[None], np.eye(3)[None]))) < 10 * eps
