import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwcca.diffops import (
    BASIC_CHECKS,
    GradCheckReport,
    cholesky_vjp,
    finite_diff_check,
    matmul_vjp,
    numerical_gradient,
    random_spd,
    relative_error,
    spd_inverse_vjp,
    within_class_cov,
    within_class_cov_vjp,
)
from dwcca.errors import DegenerateClass, DimensionMismatch, NotPositiveDefinite, SingularFactor
from dwcca.linalg import cholesky_lower, symmetrize

seeds = st.integers(0, 2**32 - 1)


# --- matmul ---------------------------------------------------------------


def test_matmul_identity_factor():
    rng = np.random.default_rng(0)
    b, g = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    ga, gb = matmul_vjp(np.eye(3), b, g)
    np.testing.assert_array_equal(ga, g @ b.T)
    np.testing.assert_array_equal(gb, g)


def test_matmul_scalar():
    ga, gb = matmul_vjp([[2.0]], [[3.0]], [[1.0]])
    assert ga.tolist() == [[3.0]] and gb.tolist() == [[2.0]]


def test_matmul_shape_errors():
    with pytest.raises(DimensionMismatch):
        matmul_vjp(np.ones((2, 3)), np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionMismatch):
        matmul_vjp(np.ones((2, 3)), np.ones((3, 4)), np.ones((2, 3)))


# --- inverse --------------------------------------------------------------


@pytest.mark.parametrize("c", [0.5, 2.0, 7.0])
def test_inverse_vjp_scaled_identity(c):
    np.testing.assert_allclose(spd_inverse_vjp(c * np.eye(3), np.eye(3)), -np.eye(3) / c**2, rtol=1e-14)


def test_inverse_vjp_identity_point():
    g = np.random.default_rng(1).standard_normal((4, 4))
    g = g + g.T
    np.testing.assert_allclose(spd_inverse_vjp(np.eye(4), g), -g, atol=1e-15)


def test_inverse_vjp_symmetric_output():
    rng = np.random.default_rng(2)
    a = random_spd(rng, 5)
    g = symmetrize(rng.standard_normal((5, 5)))
    out = spd_inverse_vjp(a, g)
    assert np.abs(out - out.T).max() <= 1e-10
    with pytest.raises(NotPositiveDefinite):
        spd_inverse_vjp(-np.eye(2), np.eye(2))


# --- cholesky -------------------------------------------------------------


@pytest.mark.parametrize("c", [0.5, 1.0, 3.0])
def test_cholesky_vjp_trace_loss(c):
    # loss = trace(L) with L = c I, a = c^2 I -> da = I / (2c)
    np.testing.assert_allclose(cholesky_vjp(c * np.eye(3), np.eye(3)), np.eye(3) / (2 * c), rtol=1e-14)


def test_cholesky_vjp_scalar():
    assert cholesky_vjp([[3.0]], [[1.0]])[0, 0] == pytest.approx(1 / 6, rel=1e-15)


def test_cholesky_vjp_reads_lower_triangle_only():
    rng = np.random.default_rng(3)
    l = cholesky_lower(random_spd(rng, 4))
    g = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(cholesky_vjp(l, g), cholesky_vjp(l, np.tril(g)))


def test_cholesky_vjp_singular_factor():
    with pytest.raises(SingularFactor):
        cholesky_vjp(np.diag([1.0, 1e-13]), np.eye(2))


def test_cholesky_vjp_symmetric():
    rng = np.random.default_rng(4)
    out = cholesky_vjp(cholesky_lower(random_spd(rng, 5)), rng.standard_normal((5, 5)))
    np.testing.assert_array_equal(out, out.T)


# --- within-class covariance ----------------------------------------------


def test_wcc_constant_classes_stationary():
    w = np.repeat(np.array([[1.0, 2.0], [-3.0, 0.5]]), 3, axis=0)
    labels = np.repeat([0, 1], 3)
    np.testing.assert_array_equal(within_class_cov(w, labels), np.zeros((2, 2)))
    gs = symmetrize(np.random.default_rng(5).standard_normal((2, 2)))
    np.testing.assert_array_equal(within_class_cov_vjp(w, labels, gs), np.zeros_like(w))


def test_wcc_two_point_hand_derivative():
    # oracle: wcc_1d_two_points_grad(0, 2) -> S = 1, dS/dx = (-1, 1)
    w = np.array([[0.0], [2.0]])
    labels = np.array([0, 0])
    assert within_class_cov(w, labels)[0, 0] == 1.0
    np.testing.assert_array_equal(within_class_cov_vjp(w, labels, np.ones((1, 1))), [[-1.0], [1.0]])


def test_wcc_degenerate_class():
    with pytest.raises(DegenerateClass):
        within_class_cov(np.ones((3, 2)), [0, 0, 1])
    with pytest.raises(DegenerateClass):
        within_class_cov_vjp(np.ones((3, 2)), [0, 0, 1], np.eye(2))


@given(seeds, st.integers(0, 2), st.floats(-100, 100))
def test_wcc_translation_invariance(seed, cls, shift):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(3), 4)
    w = rng.standard_normal((12, 3))
    moved = w.copy()
    moved[labels == cls] += shift * np.array([1.0, -0.5, 0.25])
    assert np.abs(within_class_cov(moved, labels) - within_class_cov(w, labels)).max() <= 1e-12 * max(1, shift**2)


# --- finite-difference harness --------------------------------------------


def test_numerical_gradient_quadratic():
    x = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(numerical_gradient(lambda v: float(v @ v), x), 2 * x, rtol=1e-9)


def test_relative_error_definition():
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 2.5])) == pytest.approx(0.5 / 2.5)
    assert relative_error(np.zeros(2), np.zeros(2)) == 0.0


def test_report_pass_flag_and_csv():
    ok = GradCheckReport("cholesky", 3, 1e-9, 1e-5)
    bad = GradCheckReport("cholesky", 4, 1e-4, 1e-5)
    assert ok.passed and not bad.passed
    assert GradCheckReport("x", 0, 1e-5, 1e-5).passed
    assert ok.csv_row().split(",") == ["cholesky", "3", "1.000000e-09", "1e-05", "true"]
    assert bad.csv_row().endswith(",false")


@pytest.mark.parametrize("op", list(BASIC_CHECKS))
def test_basic_checks_pass_over_seeds(op):
    factory, tol = BASIC_CHECKS[op]
    for seed in range(20):
        report = finite_diff_check(op, factory, seed, tol)
        assert report.passed, report


def test_checks_pass_tighter_tolerances():
    for op, tol in (("matmul", 1e-7), ("spd_inverse", 1e-6), ("within_class_cov", 1e-6)):
        factory, _ = BASIC_CHECKS[op]
        assert all(finite_diff_check(op, factory, s, tol).passed for s in range(5))


def test_near_singular_cholesky_probe():
    # Smallest eigenvalue 1e-10: the h = 1e-5 perturbation leaves the positive
    # definite cone, so the check fails (reported as an infinite error).
    def point(rng):
        q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        a = symmetrize(q @ np.diag([1.0, 0.5, 0.2, 1e-10]) @ q.T)
        gl = rng.standard_normal((4, 4))
        l = cholesky_lower(a)
        return (lambda x: float(np.sum(gl * cholesky_lower(symmetrize(x))))), a, cholesky_vjp(l, gl)

    report = finite_diff_check("cholesky", point, 0, 1e-5)
    assert not report.passed


def _vjp_cases(rng):
    a = random_spd(rng, 4)
    l = cholesky_lower(a)
    labels = np.repeat(np.arange(2), 4)
    w = rng.standard_normal((8, 4))
    return [
        (lambda g: spd_inverse_vjp(a, g), (4, 4)),
        (lambda g: cholesky_vjp(l, g), (4, 4)),
        (lambda g: within_class_cov_vjp(w, labels, g), (4, 4)),
        (lambda g: np.concatenate([m.ravel() for m in matmul_vjp(w, a, g)]), (8, 4)),
    ]


@settings(max_examples=30)
@given(seeds, st.floats(-3, 3), st.floats(-3, 3))
def test_vjp_linearity(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    for vjp, shape in _vjp_cases(rng):
        g1, g2 = rng.standard_normal(shape), rng.standard_normal(shape)
        lhs = vjp(alpha * g1 + beta * g2)
        rhs = alpha * vjp(g1) + beta * vjp(g2)
        assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(rhs).max())
