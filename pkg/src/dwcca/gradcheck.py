"""Finite-difference checks for every backward rule, from single matrix ops up
to a whole network, as used by ``dwcca gradcheck``."""
from __future__ import annotations

import numpy as np

from . import layer as dwcca_layer
from .config import (
    BatchNormSpec,
    Conv2dSpec,
    DenseSpec,
    DropoutSpec,
    DwccaSpec,
    GlobalAveragePoolSpec,
    MaxPoolSpec,
    ModelConfig,
    ReluSpec,
    SoftmaxOutputSpec,
)
from .diffops import BASIC_CHECKS, finite_diff_check
from .nn import build_model, cross_entropy


def _dwcca_point(rng):
    labels = np.repeat(np.arange(3), 6)
    rng.shuffle(labels)
    w = rng.standard_normal((18, 4)) + 2.0 * rng.standard_normal((3, 4))[labels]
    cfg = dwcca_layer.DwccaConfig(alpha=0.5, ridge_epsilon=1e-4)
    g = rng.standard_normal((4, 4))
    state = dwcca_layer.ProjectionState(np.eye(4) + 0.1 * np.tril(g))
    gy = rng.standard_normal((18, 4))
    _, _, tape = dwcca_layer.forward(w, labels, state, cfg, "train")

    def f(x):
        return float(np.sum(gy * dwcca_layer.forward(x, labels, state, cfg, "train")[0]))

    return f, w, dwcca_layer.backward(tape, gy)


def tiny_conv_dwcca_config(channels=4, classes=3, size=8):
    """conv 3x3 -> global average pool -> dwcca -> softmax, on ``1 x size x size`` inputs."""
    return ModelConfig(
        (1, size, size),
        [
            Conv2dSpec(channels, kernel=3, pad=1, stride=1),
            GlobalAveragePoolSpec(),
            DwccaSpec(alpha=0.5, ridge_epsilon=1e-4),
            SoftmaxOutputSpec(classes),
        ],
    )


def tiny_full_config(classes=3):
    """One of every layer kind, small enough for exhaustive finite differences."""
    return ModelConfig(
        (2, 8, 8),
        [
            Conv2dSpec(3, kernel=3, pad=1, stride=2),
            BatchNormSpec(),
            ReluSpec(),
            MaxPoolSpec(2),
            DropoutSpec(0.3),
            Conv2dSpec(5, kernel=1),
            GlobalAveragePoolSpec(),
            DenseSpec(4),
            BatchNormSpec(),
            DwccaSpec(alpha=0.3, ridge_epsilon=1e-3),
            SoftmaxOutputSpec(classes),
        ],
    )


def network_point(cfg, per_class=4):
    """Point factory comparing :meth:`Network.backward` with differences over all parameters."""

    def point(rng):
        net = build_model(cfg, int(rng.integers(2**31)))
        c = cfg.classes
        labels = np.repeat(np.arange(c), per_class)
        x = rng.standard_normal((labels.size,) + cfg.input_shape)
        x += rng.standard_normal((c,) + cfg.input_shape)[labels]
        drop_seed = int(rng.integers(2**31))
        names = sorted(net.params)
        sizes = [net.params[k].size for k in names]

        def set_flat(theta):
            off = 0
            for k, s in zip(names, sizes):
                net.params[k] = theta[off:off + s].reshape(net.params[k].shape)
                off += s

        def loss(theta):
            set_flat(theta)
            res = net.forward(x, "train", labels=labels, rng=np.random.default_rng(drop_seed), update_buffers=False)
            return cross_entropy(res.probabilities, labels)

        theta0 = np.concatenate([net.params[k].ravel() for k in names])
        set_flat(theta0.copy())
        res = net.forward(x, "train", labels=labels, rng=np.random.default_rng(drop_seed), update_buffers=False)
        grads = net.backward(res.tape, labels)
        g = np.concatenate([grads[k].ravel() for k in names])
        return loss, theta0, g

    return point


CHECKS = dict(BASIC_CHECKS)
CHECKS["dwcca_backward"] = (_dwcca_point, 1e-5)
CHECKS["network_backward"] = (network_point(tiny_conv_dwcca_config()), 1e-4)
CHECKS["network_all_layers"] = (network_point(tiny_full_config()), 1e-4)


def run_checks(seeds=20, ops=None):
    """Yield a :class:`GradCheckReport` per (op, seed)."""
    for op in ops or CHECKS:
        factory, tol = CHECKS[op]
        for seed in range(seeds):
            yield finite_diff_check(op, factory, seed, tol)
