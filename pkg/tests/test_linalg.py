import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwcca.errors import DegenerateInput, DimensionMismatch, NoConvergence, NotPositiveDefinite
from dwcca.linalg import cholesky_lower, pca_fit, pca_project, spd_inverse, sym_eigen


def random_spd(seed, d):
    g = np.random.default_rng(seed).standard_normal((d, d))
    return g.T @ g + np.eye(d)


seeds = st.integers(0, 2**32 - 1)
dims = st.integers(1, 8)


# --- cholesky -------------------------------------------------------------


def test_cholesky_hand_example():
    # oracle: cholesky_2x2(4, 2, 5) with exact fractions
    np.testing.assert_array_equal(cholesky_lower([[4.0, 2.0], [2.0, 5.0]]), [[2.0, 0.0], [1.0, 2.0]])


@pytest.mark.parametrize("d", [1, 3, 6])
def test_cholesky_identity(d):
    np.testing.assert_array_equal(cholesky_lower(np.eye(d)), np.eye(d))


def test_cholesky_diagonal_square_roots():
    np.testing.assert_array_equal(cholesky_lower([[0.25, 0.0], [0.0, 0.25]]), [[0.5, 0.0], [0.0, 0.5]])


def test_cholesky_reports_failing_pivot():
    with pytest.raises(NotPositiveDefinite) as exc:
        cholesky_lower([[1.0, 2.0], [2.0, 1.0]])
    assert exc.value.pivot_index == 1
    assert exc.value.pivot == pytest.approx(-3.0)


def test_cholesky_pivot_tolerance():
    with pytest.raises(NotPositiveDefinite):
        cholesky_lower(np.diag([1.0, 1e-13]))
    cholesky_lower(np.diag([1.0, 1e-11]))


def test_cholesky_rejects_bad_input():
    with pytest.raises(DimensionMismatch):
        cholesky_lower(np.ones((2, 3)))
    with pytest.raises(ValueError):
        cholesky_lower([[np.nan, 0.0], [0.0, 1.0]])


@given(seeds, dims)
def test_cholesky_reconstructs(seed, d):
    a = random_spd(seed, d)
    L = cholesky_lower(a)
    assert np.all(np.triu(L, 1) == 0)
    assert np.all(np.diag(L) > 0)
    assert np.abs(L @ L.T - a).max() <= 1e-9 * max(1.0, np.abs(a).max())


# --- spd inverse ----------------------------------------------------------


def test_spd_inverse_examples():
    np.testing.assert_allclose(spd_inverse([[0.5, 0.0], [0.0, 0.5]]), 2 * np.eye(2), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(spd_inverse(np.eye(4)), np.eye(4))
    # oracle: inverse_2x2(4, 2, 2, 5) -> det 16, [[5/16, -1/8], [-1/8, 1/4]]
    np.testing.assert_allclose(spd_inverse([[4.0, 2.0], [2.0, 5.0]]), [[0.3125, -0.125], [-0.125, 0.25]], atol=1e-15)


def test_spd_inverse_propagates_failure():
    with pytest.raises(NotPositiveDefinite):
        spd_inverse([[1.0, 0.0], [0.0, -1.0]])


@given(seeds, dims)
def test_spd_inverse_properties(seed, d):
    a = random_spd(seed, d)
    ai = spd_inverse(a)
    np.testing.assert_array_equal(ai, ai.T)
    assert np.abs(a @ ai - np.eye(d)).max() < 1e-8
    assert np.abs(spd_inverse(ai) - a).max() <= 1e-7 * max(1.0, np.abs(a).max())


# --- eigen ----------------------------------------------------------------


def test_eigen_diagonal():
    e = sym_eigen(np.diag([1.0, 3.0]))
    np.testing.assert_array_equal(e.eigenvalues, [3.0, 1.0])
    np.testing.assert_array_equal(e.eigenvectors, [[0.0, 1.0], [1.0, 0.0]])


def test_eigen_identity():
    np.testing.assert_array_equal(sym_eigen(np.eye(5)).eigenvalues, np.ones(5))


def test_eigen_hand_example():
    # oracle: eig_sym_2x2(2, 1, 2) -> (3, 1)
    e = sym_eigen([[2.0, 1.0], [1.0, 2.0]])
    np.testing.assert_allclose(e.eigenvalues, [3.0, 1.0], atol=1e-14)
    s = 1 / np.sqrt(2)
    # sign rule: largest-magnitude entry positive, first index on ties
    np.testing.assert_allclose(e.eigenvectors, [[s, s], [s, -s]], atol=1e-14)


def test_eigen_rejects_asymmetric():
    with pytest.raises(ValueError):
        sym_eigen([[1.0, 2.0], [0.0, 1.0]])


def test_eigen_sweep_cap():
    a = random_spd(0, 6)
    with pytest.raises(NoConvergence):
        sym_eigen(a, max_sweeps=1)


def test_eigen_matches_reference():
    from oracles import reference_eigh

    a = random_spd(3, 7)
    w_ref, v_ref = reference_eigh(a)
    e = sym_eigen(a)
    np.testing.assert_allclose(e.eigenvalues, w_ref, rtol=1e-10)
    np.testing.assert_allclose(np.abs(e.eigenvectors.T @ v_ref), np.eye(7), atol=1e-8)


@settings(max_examples=60)
@given(seeds, dims, st.floats(-3, 3))
def test_eigen_invariants(seed, d, log_scale):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, d))
    a = (g + g.T) * 10.0**log_scale
    e = sym_eigen(a)
    v, w = e.eigenvectors, e.eigenvalues
    scale = max(1.0, np.abs(a).max())
    assert np.all(np.diff(w) <= 0)
    assert np.abs(v.T @ v - np.eye(d)).max() < 1e-8
    assert np.abs(v @ np.diag(w) @ v.T - a).max() < 1e-8 * scale
    assert abs(w.sum() - np.trace(a)) <= 1e-8 * max(1.0, np.abs(w).sum())
    idx = np.argmax(np.abs(v), axis=0)
    assert np.all(v[idx, np.arange(d)] > 0)


@given(seeds, dims)
def test_eigen_determinant_matches_cholesky(seed, d):
    a = random_spd(seed, d)
    det = np.prod(np.diag(cholesky_lower(a))) ** 2
    assert np.prod(sym_eigen(a).eigenvalues) == pytest.approx(det, rel=1e-6)


def test_eigen_deterministic():
    a = random_spd(5, 9)
    e1, e2 = sym_eigen(a), sym_eigen(a)
    np.testing.assert_array_equal(e1.eigenvalues, e2.eigenvalues)
    np.testing.assert_array_equal(e1.eigenvectors, e2.eigenvectors)


def test_eigen_ill_conditioned_covariance():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((50, 12)) @ np.diag(10.0 ** rng.uniform(-6, 3, 12))
    a = x.T @ x / 50
    e = sym_eigen(a)
    assert np.abs(e.eigenvectors @ np.diag(e.eigenvalues) @ e.eigenvectors.T - a).max() < 1e-8 * np.abs(a).max()


# --- PCA ------------------------------------------------------------------


def test_pca_axis_aligned():
    x = np.column_stack([np.arange(10.0), np.zeros(10)])
    b = pca_fit(x, 2)
    np.testing.assert_array_equal(np.abs(b.components[:, 0]), [1.0, 0.0])
    assert b.explained_variance[1] == 0.0


def test_pca_isotropic_sample():
    # oracle: isotropic_pca_ratio() -> 1.062 for n = 10000, seed 0
    x = np.random.default_rng(0).standard_normal((10000, 3))
    ev = pca_fit(x, 3).explained_variance
    assert 0.5 <= ev[0] / ev[-1] <= 2.0
    assert ev[0] / ev[-1] == pytest.approx(1.06215820564906, rel=1e-9)


def test_pca_translation():
    x = np.random.default_rng(2).standard_normal((40, 3))
    b1, b2 = pca_fit(x), pca_fit(x + [5.0, -1.0, 2.0])
    np.testing.assert_allclose(b2.mean, b1.mean + [5.0, -1.0, 2.0])
    np.testing.assert_allclose(b2.components, b1.components, atol=1e-10)


def test_pca_needs_two_rows():
    with pytest.raises(DegenerateInput):
        pca_fit(np.ones((1, 3)))


def test_pca_project_examples():
    x = np.random.default_rng(3).standard_normal((30, 3))
    b = pca_fit(x, 2)
    np.testing.assert_allclose(pca_project(b, x.mean(axis=0, keepdims=True)), 0.0, atol=1e-14)
    full = pca_fit(x, 3)._replace(components=np.eye(3))
    np.testing.assert_allclose(pca_project(full, x), x - x.mean(axis=0))
    with pytest.raises(DimensionMismatch):
        pca_project(b, np.ones((2, 4)))


def test_pca_project_diagonal_line():
    # points along the 45 degree diagonal; k = 1 coordinates are signed distances along it
    t = np.array([-2.0, -1.0, 0.5, 2.5])
    x = np.column_stack([t, t]) / np.sqrt(2)
    b = pca_fit(x, 1)
    np.testing.assert_allclose(pca_project(b, x)[:, 0], t - t.mean(), atol=1e-12)


@given(seeds, st.integers(2, 6))
def test_pca_projected_covariance_is_diagonal(seed, d):
    x = np.random.default_rng(seed).standard_normal((50, d)) * np.arange(1, d + 1)
    b = pca_fit(x, d)
    p = pca_project(b, x)
    cov = p.T @ p / len(p)
    np.testing.assert_allclose(cov, np.diag(b.explained_variance), rtol=1e-6, atol=1e-9)
    assert np.abs(b.components.T @ b.components - np.eye(d)).max() < 1e-8
