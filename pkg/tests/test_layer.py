import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dwcca.analysis import class_cov_eigenspectra
from dwcca.diffops import finite_diff_check, within_class_cov
from dwcca.errors import DegenerateBatch, DimensionMismatch, FrozenState, StaleTape
from dwcca.gradcheck import CHECKS
from dwcca.layer import (
    DwccaConfig,
    ProjectionState,
    backward,
    estimate_batch_wcc,
    forward,
    projection_from_wcc,
    update_moving_average,
    whiten_within_class,
)

FOUR_POINTS = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
FOUR_LABELS = np.array([0, 0, 1, 1])
seeds = st.integers(0, 2**32 - 1)


def gaussian_batch(seed, classes=3, per_class=20, d=4, spread=3.0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), per_class)
    mix = rng.standard_normal((d, d)) * rng.uniform(0.2, 3.0, d)
    w = rng.standard_normal((labels.size, d)) @ mix + spread * rng.standard_normal((classes, d))[labels]
    return w, labels


def projected_wcc(out, labels):
    return within_class_cov(out, labels)


# --- config and state -----------------------------------------------------


def test_config_validation():
    DwccaConfig(alpha=1.0, ridge_epsilon=0.0)
    for bad in (dict(alpha=0.0), dict(alpha=1.5), dict(ridge_epsilon=-1e-3)):
        with pytest.raises(ValueError):
            DwccaConfig(**bad)


def test_state_is_read_only():
    s = ProjectionState.identity(3)
    with pytest.raises(ValueError):
        s.b_bar[0, 0] = 2.0
    with pytest.raises(ValueError):
        ProjectionState(np.ones((2, 3)))
    with pytest.raises(ValueError):
        ProjectionState(np.array([[np.inf]]))


# --- batch statistics -----------------------------------------------------


def test_four_point_wcc():
    # oracle: within_class_cov_exact -> [[1/2, 0], [0, 1/2]]
    s, stats = estimate_batch_wcc(FOUR_POINTS, FOUR_LABELS, DwccaConfig(ridge_epsilon=1e-4))
    np.testing.assert_allclose(s, [[0.5 + 1e-4, 0.0], [0.0, 0.5 + 1e-4]], rtol=0, atol=1e-16)
    assert stats.class_count == 2
    assert stats.counts.sum() == 4
    np.testing.assert_array_equal(stats.means, [[1.0, 0.0], [0.0, 1.0]])


def test_constant_classes_give_ridge():
    w = np.repeat(np.array([[1.0, -1.0, 2.0], [4.0, 0.0, 1.0]]), 5, axis=0)
    s, _ = estimate_batch_wcc(w, np.repeat([0, 1], 5), DwccaConfig(ridge_epsilon=1e-3))
    np.testing.assert_array_equal(s, 1e-3 * np.eye(3))


def test_duplicated_gaussian_class():
    # oracle: duplicated_class_wcc_deviation() -> 0.006977849707342498
    x = np.random.default_rng(0).standard_normal((100000, 3))
    labels = np.repeat([0, 1], 50000)
    s, _ = estimate_batch_wcc(x, labels, DwccaConfig(ridge_epsilon=0.0))
    dev = np.abs(s - np.eye(3)).max()
    assert dev < 0.05
    assert dev == pytest.approx(0.006977849707342498, rel=1e-8)


@pytest.mark.parametrize(
    "labels", [np.array([0, 0, 0, 0]), np.array([0, 0, 0, 1]), np.array([0, 1, 1, 1])]
)
def test_degenerate_batches(labels):
    with pytest.raises(DegenerateBatch):
        estimate_batch_wcc(FOUR_POINTS, labels, DwccaConfig())
    with pytest.raises(DegenerateBatch):
        forward(FOUR_POINTS, labels, ProjectionState.identity(2), DwccaConfig())


# --- projection -----------------------------------------------------------


def test_projection_examples():
    np.testing.assert_allclose(projection_from_wcc(0.25 * np.eye(2)), 2 * np.eye(2), rtol=1e-15)
    np.testing.assert_array_equal(projection_from_wcc(np.eye(3)), np.eye(3))
    b = projection_from_wcc(0.5 * np.eye(2))
    np.testing.assert_allclose(b, np.sqrt(2) * np.eye(2), rtol=1e-15)
    np.testing.assert_allclose(projected_wcc(FOUR_POINTS @ b, FOUR_LABELS), np.eye(2), atol=1e-15)


@given(seeds)
def test_projection_is_inverse_factor(seed):
    w, labels = gaussian_batch(seed)
    s, _ = estimate_batch_wcc(w, labels, DwccaConfig())
    b = projection_from_wcc(s)
    assert np.all(np.triu(b, 1) == 0)
    np.testing.assert_allclose(b @ b.T, np.linalg.inv(s), rtol=1e-8, atol=1e-8 * np.abs(np.linalg.inv(s)).max())


# --- moving average -------------------------------------------------------


def test_moving_average_examples():
    s1 = update_moving_average(ProjectionState.identity(2), 2 * np.eye(2), DwccaConfig(alpha=0.1))
    np.testing.assert_allclose(s1.b_bar, 1.1 * np.eye(2), rtol=1e-15)
    assert s1.update_count == 1
    b_hat = np.random.default_rng(0).standard_normal((3, 3))
    s2 = update_moving_average(ProjectionState.identity(3), b_hat, DwccaConfig(alpha=1.0))
    np.testing.assert_array_equal(s2.b_bar, b_hat)


def test_moving_average_geometric_law():
    # oracle: moving_average_distance(alpha, t, d0) = (1 - alpha)^t d0
    rng = np.random.default_rng(1)
    b_hat = rng.standard_normal((4, 4))
    state = ProjectionState(rng.standard_normal((4, 4)))
    d0 = np.abs(state.b_bar - b_hat).max()
    cfg = DwccaConfig(alpha=0.1)
    for t in range(1, 51):
        state = update_moving_average(state, b_hat, cfg)
        assert abs(np.abs(state.b_bar - b_hat).max() - 0.9**t * d0) <= 1e-12


def test_moving_average_errors():
    with pytest.raises(FrozenState):
        update_moving_average(ProjectionState.identity(2).frozen(), np.eye(2), DwccaConfig())
    with pytest.raises(DimensionMismatch):
        update_moving_average(ProjectionState.identity(2), np.eye(3), DwccaConfig())


# --- forward --------------------------------------------------------------


def test_frozen_identity_passthrough():
    w = np.random.default_rng(2).standard_normal((6, 3))
    state = ProjectionState.identity(3).frozen()
    out, new_state, _ = forward(w, None, state, DwccaConfig(), mode="eval")
    np.testing.assert_array_equal(out, w)
    assert new_state is state


def test_frozen_state_rejects_training_forward():
    with pytest.raises(FrozenState):
        forward(FOUR_POINTS, FOUR_LABELS, ProjectionState.identity(2).frozen(), DwccaConfig())


def test_whole_dataset_whitening():
    rng = np.random.default_rng(3)
    labels = np.repeat(np.arange(5), 40)
    w = rng.standard_normal((200, 6)) * [0.5, 1.0, 2.0, 3.0, 5.0, 8.0] + 4 * rng.standard_normal((5, 6))[labels]
    out, state, _ = forward(w, labels, ProjectionState.identity(6), DwccaConfig(alpha=1.0, ridge_epsilon=1e-6))
    assert np.abs(projected_wcc(out, labels) - np.eye(6)).max() < 1e-4
    np.testing.assert_allclose(state.b_bar, whiten_within_class(w, labels, 1e-6), rtol=1e-12)


@given(seeds, st.sampled_from([1e-6, 1e-4, 1e-2]))
@settings(max_examples=30)
def test_whitening_ridge_bound(seed, eps):
    # projected eigenvalues are lambda / (lambda + eps), so the worst one is set by lambda_min
    w, labels = gaussian_batch(seed, classes=4, per_class=15)
    out, _, _ = forward(w, labels, ProjectionState.identity(4), DwccaConfig(alpha=1.0, ridge_epsilon=eps))
    lam = np.linalg.eigvalsh(within_class_cov(w, labels))
    got = np.sort(np.linalg.eigvalsh(projected_wcc(out, labels)))
    np.testing.assert_allclose(got, np.sort(lam / (lam + eps)), rtol=1e-7, atol=1e-9)


def test_four_point_training_forward():
    # oracle: four_point_dwcca_scale(0.1, 1e-4) -> 1.0414072162226526
    out, state, _ = forward(FOUR_POINTS, FOUR_LABELS, ProjectionState.identity(2), DwccaConfig(alpha=0.1))
    np.testing.assert_allclose(state.b_bar, 1.0414072162226526 * np.eye(2), rtol=1e-14)
    np.testing.assert_allclose(out, FOUR_POINTS * 1.0414072162226526, rtol=1e-14)
    assert state.update_count == 1


def test_forward_rejects_mismatch():
    with pytest.raises(DimensionMismatch):
        forward(np.ones((4, 3)), FOUR_LABELS, ProjectionState.identity(2), DwccaConfig())
    with pytest.raises(ValueError):
        forward(FOUR_POINTS, FOUR_LABELS, ProjectionState.identity(2), DwccaConfig(), mode="test")


@given(seeds)
@settings(max_examples=20)
def test_frozen_forward_deterministic(seed):
    w, labels = gaussian_batch(seed)
    _, state, _ = forward(w, labels, ProjectionState.identity(4), DwccaConfig())
    frozen = state.frozen()
    a, _, _ = forward(w, None, frozen, DwccaConfig(), mode="eval")
    b, _, _ = forward(w.copy(), None, frozen, DwccaConfig(), mode="eval")
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("seed", range(10))
def test_eigenvalue_range_shrinks(seed):
    w, labels = gaussian_batch(seed)
    out, _, _ = forward(w, labels, ProjectionState.identity(4), DwccaConfig(alpha=1.0))

    def spread(x):
        e = class_cov_eigenspectra(x, labels).eigenvalues
        return e.max() - e.min()

    assert spread(out) <= spread(w)


@given(seeds, st.integers(0, 2), st.floats(-50, 50))
@settings(max_examples=30)
def test_statistics_translation_invariant(seed, cls, shift):
    w, labels = gaussian_batch(seed)
    moved = w.copy()
    moved[labels == cls] += shift
    cfg = DwccaConfig()
    s1, _ = estimate_batch_wcc(w, labels, cfg)
    s2, _ = estimate_batch_wcc(moved, labels, cfg)
    scale = max(1.0, shift**2)
    assert np.abs(s1 - s2).max() <= 1e-12 * scale * np.abs(s1).max()
    b1, b2 = projection_from_wcc(s1), projection_from_wcc(s2)
    assert np.abs(b1 - b2).max() <= 1e-10 * scale * np.abs(b1).max()


# --- backward -------------------------------------------------------------


def test_backward_alpha_zero_is_data_path():
    w, labels = gaussian_batch(4)
    _, _, tape = forward(w, labels, ProjectionState.identity(4), DwccaConfig(alpha=0.5))
    gy = np.random.default_rng(0).standard_normal(w.shape)
    np.testing.assert_array_equal(backward(dataclasses.replace(tape, alpha=0.0), gy), gy @ tape.b_bar.T)


def test_backward_frozen_is_linear_layer():
    w, _ = gaussian_batch(5)
    b = np.random.default_rng(1).standard_normal((4, 4))
    state = ProjectionState(b).frozen()
    _, _, tape = forward(w, None, state, DwccaConfig(), mode="eval")
    gy = np.random.default_rng(2).standard_normal(w.shape)
    np.testing.assert_array_equal(backward(tape, gy, state), gy @ b.T)


def test_backward_finite_differences():
    factory, tol = CHECKS["dwcca_backward"]
    assert tol == 1e-5
    for seed in range(20):
        report = finite_diff_check("dwcca_backward", factory, seed, tol)
        assert report.passed, report


def test_backward_sum_loss_finite_differences():
    from dwcca.diffops import numerical_gradient, relative_error

    w, labels = gaussian_batch(6, classes=3, per_class=5)
    state = ProjectionState.identity(4)
    cfg = DwccaConfig(alpha=0.1)
    _, _, tape = forward(w, labels, state, cfg)
    g = backward(tape, np.ones_like(w))
    fd = numerical_gradient(lambda x: float(forward(x, labels, state, cfg)[0].sum()), w)
    assert relative_error(g, fd) < 1e-5


def test_backward_stale_tape():
    w, labels = gaussian_batch(7)
    cfg = DwccaConfig()
    _, s1, tape = forward(w, labels, ProjectionState.identity(4), cfg)
    _, s2, _ = forward(w, labels, s1, cfg)
    backward(tape, np.ones_like(w), s1)
    with pytest.raises(StaleTape):
        backward(tape, np.ones_like(w), s2)


@given(seeds, st.floats(-2, 2), st.floats(-2, 2))
@settings(max_examples=20)
def test_backward_linear_in_cotangent(seed, a, b):
    w, labels = gaussian_batch(seed)
    _, _, tape = forward(w, labels, ProjectionState.identity(4), DwccaConfig())
    rng = np.random.default_rng(seed)
    g1, g2 = rng.standard_normal(w.shape), rng.standard_normal(w.shape)
    lhs = backward(tape, a * g1 + b * g2)
    rhs = a * backward(tape, g1) + b * backward(tape, g2)
    assert np.abs(lhs - rhs).max() <= 1e-10 * max(1.0, np.abs(rhs).max())
