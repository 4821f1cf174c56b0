"""The DWCCA layer: mini-batch within-class covariance normalization.

In training mode every batch yields an estimate of the within-class
covariance ``S_b`` (plus a ridge ``eps * I``), the batch projection
``B_b = cholesky(inv(S_b))`` and a moving-average update
``B_bar <- (1 - alpha) B_bar + alpha B_b``. The layer output is
``W_b @ B_bar`` using the updated projection. In frozen mode ``B_bar`` is
fixed and the layer is a plain linear map.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffops import wcc_projection, wcc_projection_vjp
from .errors import DegenerateBatch, DimensionMismatch, FrozenState, StaleTape
from .linalg import as_matrix, cholesky_lower, spd_inverse

TRAINING = "training"
FROZEN = "frozen"


@dataclass(frozen=True)
class DwccaConfig:
    alpha: float = 0.1
    ridge_epsilon: float = 1e-4
    embedding_dim: int | None = None

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if not self.ridge_epsilon >= 0.0:
            raise ValueError(f"ridge_epsilon must be >= 0, got {self.ridge_epsilon}")


@dataclass(frozen=True)
class ProjectionState:
    b_bar: np.ndarray
    update_count: int = 0
    mode: str = TRAINING

    def __post_init__(self):
        b = np.asarray(self.b_bar, dtype=np.float64)
        if b.ndim != 2 or b.shape[0] != b.shape[1] or not np.all(np.isfinite(b)):
            raise ValueError("b_bar must be a finite square matrix")
        b.flags.writeable = False
        object.__setattr__(self, "b_bar", b)
        if self.mode not in (TRAINING, FROZEN):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def identity(cls, d):
        return cls(np.eye(d))

    def frozen(self):
        return ProjectionState(self.b_bar, self.update_count, FROZEN)

    def training(self):
        return ProjectionState(self.b_bar, self.update_count, TRAINING)


@dataclass(frozen=True)
class ClassStats:
    counts: np.ndarray
    means: np.ndarray
    classes: np.ndarray

    @property
    def class_count(self):
        return len(self.classes)


def _class_stats(w, labels):
    labels = np.asarray(labels)
    if labels.shape != (w.shape[0],):
        raise DimensionMismatch(f"expected {w.shape[0]} labels, got shape {labels.shape}")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise DegenerateBatch(f"batch contains {classes.size} class(es); need at least 2")
    if counts.min() < 2:
        bad = classes[np.argmin(counts)]
        raise DegenerateBatch(f"class {bad} has {counts.min()} sample(s) in the batch; need at least 2")
    means = np.stack([w[labels == c].mean(axis=0) for c in classes])
    return ClassStats(counts, means, classes)


def estimate_batch_wcc(w_b, labels, cfg):
    """Ridge-stabilized within-class covariance of one batch, plus its class statistics."""
    w_b = as_matrix(w_b, "w_b")
    stats = _class_stats(w_b, labels)
    s, _, _ = wcc_projection(w_b, labels, cfg.ridge_epsilon)
    return s, stats


def projection_from_wcc(s):
    """``cholesky_lower(inv(s))``."""
    return cholesky_lower(spd_inverse(s))


def update_moving_average(state, b_hat, cfg):
    if state.mode == FROZEN:
        raise FrozenState("cannot update a frozen projection state")
    b_hat = as_matrix(b_hat, "b_hat")
    if b_hat.shape != state.b_bar.shape:
        raise DimensionMismatch(f"b_hat shape {b_hat.shape} != b_bar shape {state.b_bar.shape}")
    a = cfg.alpha
    return ProjectionState((1.0 - a) * state.b_bar + a * b_hat, state.update_count + 1, TRAINING)


@dataclass
class DwccaTape:
    w: np.ndarray
    labels: np.ndarray | None
    b_bar: np.ndarray
    alpha: float
    update_count: int
    intermediates: tuple | None = field(default=None, repr=False)


def forward(w_b, labels, state, cfg, mode="train"):
    """Project a batch; returns ``(output, new_state, tape)``.

    ``mode="train"`` estimates the batch statistics, updates ``B_bar`` and
    projects with the updated matrix. ``mode="eval"`` projects with the
    current ``B_bar`` and leaves the state untouched (labels are ignored).
    """
    w_b = as_matrix(w_b, "w_b")
    if w_b.shape[1] != state.b_bar.shape[0]:
        raise DimensionMismatch(f"input dimension {w_b.shape[1]} != projection size {state.b_bar.shape[0]}")
    if mode == "eval":
        tape = DwccaTape(w_b, None, state.b_bar, cfg.alpha, state.update_count)
        return w_b @ state.b_bar, state, tape
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if state.mode == FROZEN:
        raise FrozenState("training-mode forward on a frozen projection state")
    if labels is None:
        raise DegenerateBatch("training-mode forward requires labels")
    _class_stats(w_b, labels)
    inter = wcc_projection(w_b, labels, cfg.ridge_epsilon)
    new_state = update_moving_average(state, inter[2], cfg)
    tape = DwccaTape(w_b, np.asarray(labels), new_state.b_bar, cfg.alpha, new_state.update_count, inter)
    return w_b @ new_state.b_bar, new_state, tape


def backward(tape, gy, state=None):
    """Cotangent of the layer input.

    Two paths: the data path ``gy @ B_bar.T`` and, for training tapes, the
    statistics path through ``alpha * B_b``. The incoming ``B_bar`` (before
    this batch's update) is treated as a constant.

    Passing the current ``state`` enables the staleness check.
    """
    if state is not None and state.update_count != tape.update_count:
        raise StaleTape(
            f"projection state was updated {state.update_count - tape.update_count} time(s) since forward"
        )
    gy = as_matrix(gy, "gy")
    if gy.shape[0] != tape.w.shape[0] or gy.shape[1] != tape.b_bar.shape[1]:
        raise DimensionMismatch(f"cotangent shape {gy.shape} does not match output shape")
    gw = gy @ tape.b_bar.T
    if tape.intermediates is not None and tape.alpha != 0.0:
        g_b_hat = tape.alpha * (tape.w.T @ gy)
        gw = gw + wcc_projection_vjp(tape.w, tape.labels, tape.intermediates, g_b_hat)
    return gw


def whiten_within_class(w, labels, ridge_epsilon=1e-6):
    """Conventional whole-dataset WCCN projection ``cholesky(inv(S_w + eps I))``."""
    s, _ = estimate_batch_wcc(w, labels, DwccaConfig(alpha=1.0, ridge_epsilon=ridge_epsilon))
    return projection_from_wcc(s)

