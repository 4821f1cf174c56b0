"""Layer-stack network with hand-written forward and backward passes.

Each layer kind from :mod:`dwcca.config` has a class with ``forward`` and
``backward``. A :class:`Network` owns the learnable parameters and the
non-learnable buffers (batchnorm running statistics, the DWCCA projection
state), keyed ``"<layer index>.<name>"``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import layer as dwcca_layer
from .config import ModelConfig
from .errors import DegenerateBatch, ShapeMismatch, StaleTape

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


def _uniform_fan_in(rng, shape, fan_in):
    # variance 1 / fan_in
    limit = np.sqrt(3.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer: identity with no parameters."""

    def __init__(self, spec, index, in_shape):
        self.spec = spec
        self.index = index
        self.in_shape = tuple(in_shape)
        self.out_shape = self.infer_shape(self.in_shape)

    def infer_shape(self, in_shape):
        return in_shape

    def init_params(self, rng):
        return {}

    def init_buffers(self):
        return {}

    def forward(self, params, buffers, x, ctx):
        return x, None

    def backward(self, params, cache, gy):
        return gy, {}

    def fail(self, message):
        raise ShapeMismatch(f"{self.spec.type}: {message}", self.index)


class Conv2d(Layer):
    def infer_shape(self, in_shape):
        if len(in_shape) != 3:
            self.fail(f"expects (channels, height, width) input, got {in_shape}")
        c, h, w = in_shape
        (kh, kw), p, s = self.spec.kernel, self.spec.pad, self.spec.stride
        oh = (h + 2 * p - kh) // s + 1
        ow = (w + 2 * p - kw) // s + 1
        if oh < 1 or ow < 1:
            self.fail(f"kernel {kh}x{kw} does not fit input {h}x{w} with pad {p}")
        return (self.spec.channels, oh, ow)

    def init_params(self, rng):
        c = self.in_shape[0]
        kh, kw = self.spec.kernel
        out = self.spec.channels
        return {
            "W": _uniform_fan_in(rng, (out, c, kh, kw), c * kh * kw),
            "b": np.zeros(out),
        }

    def forward(self, params, buffers, x, ctx):
        p, s = self.spec.pad, self.spec.stride
        kh, kw = self.spec.kernel
        _, oh, ow = self.out_shape
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :oh, :ow]
        y = np.tensordot(win, params["W"], axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        return y + params["b"][None, :, None, None], (x.shape, xp.shape, win)

    def backward(self, params, cache, gy):
        x_shape, xp_shape, win = cache
        p, s = self.spec.pad, self.spec.stride
        kh, kw = self.spec.kernel
        _, oh, ow = self.out_shape
        grads = {
            "W": np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3])),
            "b": gy.sum(axis=(0, 2, 3)),
        }
        gwin = np.tensordot(gy, params["W"], axes=([1], [0]))  # n, oh, ow, c, kh, kw
        gxp = np.zeros(xp_shape)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + s * (oh - 1) + 1:s, j:j + s * (ow - 1) + 1:s] += gwin[..., i, j].transpose(0, 3, 1, 2)
        h, w = x_shape[2], x_shape[3]
        return gxp[:, :, p:p + h, p:p + w], grads


class Dense(Layer):
    def infer_shape(self, in_shape):
        return (self.spec.units,)

    def init_params(self, rng):
        fan_in = int(np.prod(self.in_shape))
        return {"W": _uniform_fan_in(rng, (fan_in, self.spec.units), fan_in), "b": np.zeros(self.spec.units)}

    def forward(self, params, buffers, x, ctx):
        x2 = x.reshape(x.shape[0], -1)
        return x2 @ params["W"] + params["b"], (x.shape, x2)

    def backward(self, params, cache, gy):
        shape, x2 = cache
        grads = {"W": x2.T @ gy, "b": gy.sum(axis=0)}
        return (gy @ params["W"].T).reshape(shape), grads


class BatchNorm(Layer):
    """Per-feature (dense input) or per-channel (image input) batch normalization."""

    @property
    def _channels(self):
        return self.in_shape[0]

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bshape(self, x):
        return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)

    def init_params(self, rng):
        return {"gamma": np.ones(self._channels), "beta": np.zeros(self._channels)}

    def init_buffers(self):
        return {"running_mean": np.zeros(self._channels), "running_var": np.ones(self._channels)}

    def forward(self, params, buffers, x, ctx):
        axes, bs = self._axes(x), self._bshape(x)
        if ctx.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if ctx.update_buffers:
                buffers["running_mean"] = (1 - BN_MOMENTUM) * buffers["running_mean"] + BN_MOMENTUM * mean
                buffers["running_var"] = (1 - BN_MOMENTUM) * buffers["running_var"] + BN_MOMENTUM * var
        else:
            mean, var = buffers["running_mean"], buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (x - mean.reshape(bs)) * inv_std.reshape(bs)
        y = params["gamma"].reshape(bs) * xhat + params["beta"].reshape(bs)
        return y, (xhat, inv_std, ctx.train)

    def backward(self, params, cache, gy):
        xhat, inv_std, train = cache
        axes, bs = self._axes(gy), self._bshape(gy)
        grads = {"gamma": (gy * xhat).sum(axis=axes), "beta": gy.sum(axis=axes)}
        gxhat = gy * params["gamma"].reshape(bs)
        if not train:
            return gxhat * inv_std.reshape(bs), grads
        m = gy.size // gy.shape[1]
        gx = (inv_std.reshape(bs) / m) * (
            m * gxhat
            - gxhat.sum(axis=axes).reshape(bs)
            - xhat * (gxhat * xhat).sum(axis=axes).reshape(bs)
        )
        return gx, grads


class Relu(Layer):
    def forward(self, params, buffers, x, ctx):
        mask = x > 0
        return x * mask, mask

    def backward(self, params, cache, gy):
        return gy * cache, {}


class MaxPool(Layer):
    def infer_shape(self, in_shape):
        if len(in_shape) != 3:
            self.fail(f"expects (channels, height, width) input, got {in_shape}")
        c, h, w = in_shape
        ph, pw = self.spec.size
        if h < ph or w < pw:
            self.fail(f"pool {ph}x{pw} larger than input {h}x{w}")
        return (c, h // ph, w // pw)

    def forward(self, params, buffers, x, ctx):
        n, c, h, w = x.shape
        ph, pw = self.spec.size
        _, oh, ow = self.out_shape
        blocks = x[:, :, :oh * ph, :ow * pw].reshape(n, c, oh, ph, ow, pw).transpose(0, 1, 2, 4, 3, 5)
        blocks = blocks.reshape(n, c, oh, ow, ph * pw)
        arg = blocks.argmax(axis=-1)
        y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        return y, (x.shape, arg)

    def backward(self, params, cache, gy):
        shape, arg = cache
        n, c, h, w = shape
        ph, pw = self.spec.size
        _, oh, ow = self.out_shape
        gblocks = np.zeros((n, c, oh, ow, ph * pw))
        np.put_along_axis(gblocks, arg[..., None], gy[..., None], axis=-1)
        gblocks = gblocks.reshape(n, c, oh, ow, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * ph, ow * pw)
        gx = np.zeros(shape)
        gx[:, :, :oh * ph, :ow * pw] = gblocks
        return gx, {}


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)`` during training."""

    def forward(self, params, buffers, x, ctx):
        rate = self.spec.rate
        if not ctx.train or rate == 0.0:
            return x, None
        mask = (ctx.rng.random(x.shape) >= rate) / (1.0 - rate)
        return x * mask, mask

    def backward(self, params, cache, gy):
        return (gy if cache is None else gy * cache), {}


class GlobalAveragePool(Layer):
    def infer_shape(self, in_shape):
        if len(in_shape) != 3:
            self.fail(f"expects (channels, height, width) input, got {in_shape}")
        return (in_shape[0],)

    def forward(self, params, buffers, x, ctx):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, params, cache, gy):
        n, c, h, w = cache
        return np.broadcast_to(gy[:, :, None, None] / (h * w), cache).copy(), {}


class Dwcca(Layer):
    def infer_shape(self, in_shape):
        if len(in_shape) != 1:
            self.fail(f"expects flat (features,) input, got {in_shape}")
        return in_shape

    @property
    def config(self):
        return dwcca_layer.DwccaConfig(self.spec.alpha, self.spec.ridge_epsilon, self.in_shape[0])

    def init_buffers(self):
        return {"projection": dwcca_layer.ProjectionState.identity(self.in_shape[0])}

    def forward(self, params, buffers, x, ctx):
        state = buffers["projection"]
        if ctx.train:
            if ctx.labels is None:
                raise DegenerateBatch("training-mode forward through a dwcca layer needs labels")
            y, new_state, tape = dwcca_layer.forward(x, ctx.labels, state, self.config, "train")
            if ctx.update_buffers:
                buffers["projection"] = new_state
        else:
            y, _, tape = dwcca_layer.forward(x, None, state, self.config, "eval")
        return y, tape

    def backward(self, params, cache, gy):
        return dwcca_layer.backward(cache, gy), {}


class SoftmaxOutput(Layer):
    """Optional learned projection to ``classes`` logits followed by a softmax.

    ``backward`` receives the cotangent of the logits.
    """

    def infer_shape(self, in_shape):
        if len(in_shape) != 1:
            self.fail(f"expects flat (features,) input, got {in_shape}")
        if not self.spec.linear and in_shape[0] != self.spec.classes:
            self.fail(f"softmax without projection needs {self.spec.classes} inputs, got {in_shape[0]}")
        return (self.spec.classes,)

    def init_params(self, rng):
        if not self.spec.linear:
            return {}
        d = self.in_shape[0]
        return {"W": _uniform_fan_in(rng, (d, self.spec.classes), d), "b": np.zeros(self.spec.classes)}

    def forward(self, params, buffers, x, ctx):
        logits = x @ params["W"] + params["b"] if self.spec.linear else x
        z = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True), x

    def backward(self, params, cache, g_logits):
        if not self.spec.linear:
            return g_logits, {}
        x = cache
        return g_logits @ params["W"].T, {"W": x.T @ g_logits, "b": g_logits.sum(axis=0)}


LAYER_CLASSES = {
    "conv2d": Conv2d,
    "dense": Dense,
    "batchnorm": BatchNorm,
    "relu": Relu,
    "maxpool": MaxPool,
    "dropout": Dropout,
    "global_average_pool": GlobalAveragePool,
    "dwcca": Dwcca,
    "softmax_output": SoftmaxOutput,
}


def build_layers(cfg):
    """Instantiate layers and chain-check shapes. Raises ShapeMismatch with the layer index."""
    layers = []
    shape = cfg.input_shape
    for i, spec in enumerate(cfg.layers):
        lay = LAYER_CLASSES[spec.type](spec, i, shape)
        layers.append(lay)
        shape = lay.out_shape
    return layers


@dataclass
class _Context:
    train: bool
    labels: np.ndarray | None
    rng: np.random.Generator | None
    update_buffers: bool


@dataclass
class Tape:
    caches: list
    version: int
    batch_size: int


@dataclass
class ForwardResult:
    probabilities: np.ndarray
    embeddings: np.ndarray | None
    tape: Tape | None

    def __iter__(self):
        return iter((self.probabilities, self.embeddings, self.tape))


class Network:
    """Parameters, buffers and layer objects for one :class:`ModelConfig`."""

    def __init__(self, cfg: ModelConfig, params, buffers, seed=0):
        self.cfg = cfg
        self.layers = build_layers(cfg)
        self.params = params
        self.buffers = buffers
        self.version = 0
        self.dropout_rng = np.random.default_rng([seed, 1])

    @property
    def classes(self):
        return self.cfg.classes

    @property
    def tap_index(self):
        """Layer whose output is the embedding: the dwcca layer, else the layer feeding the softmax."""
        for lay in self.layers:
            if lay.spec.type == "dwcca":
                return lay.index
        return len(self.layers) - 2

    @property
    def embedding_dim(self):
        return self.layers[self.tap_index].out_shape[0]

    def layer_params(self, i):
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def layer_buffers(self, i):
        prefix = f"{i}."
        return {k[len(prefix):]: v for k, v in self.buffers.items() if k.startswith(prefix)}

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.cfg.input_shape:
            raise ShapeMismatch(f"input shape {x.shape[1:]} != configured {self.cfg.input_shape}", 0)
        return x

    def forward(self, x, mode="eval", labels=None, rng=None, tap=False, update_buffers=True):
        """Run the stack; returns ``ForwardResult(probabilities, embeddings, tape)``.

        ``mode="train"`` uses batch statistics, active dropout and updates the
        running buffers (unless ``update_buffers`` is false); ``labels`` are
        needed when the model contains a dwcca layer. ``mode="eval"`` is a pure
        function of the network state and ``x``.
        """
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = self._check_input(x)
        train = mode == "train"
        ctx = _Context(train, None if labels is None else np.asarray(labels), rng or self.dropout_rng, update_buffers)
        caches = []
        embeddings = None
        for lay in self.layers:
            bufs = self.layer_buffers(lay.index)
            x, cache = lay.forward(self.layer_params(lay.index), bufs, x, ctx)
            for k, v in bufs.items():
                self.buffers[f"{lay.index}.{k}"] = v
            caches.append(cache)
            if tap and lay.index == self.tap_index:
                embeddings = x
        if train and update_buffers:
            self.version += 1
        return ForwardResult(x, embeddings, Tape(caches, self.version, x.shape[0]) if train else None)

    def backward(self, tape, labels):
        """Gradients of mean categorical cross-entropy w.r.t. every parameter."""
        if tape is None:
            raise StaleTape("backward needs the tape of a train-mode forward")
        if tape.version != self.version:
            raise StaleTape("network state changed since the forward pass")
        labels = np.asarray(labels)
        probs = self._last_probs(tape)
        g = probs.copy()
        g[np.arange(len(labels)), labels] -= 1.0
        g /= len(labels)
        grads = {}
        for lay, cache in zip(reversed(self.layers), reversed(tape.caches)):
            g, lg = lay.backward(self.layer_params(lay.index), cache, g)
            for k, v in lg.items():
                grads[f"{lay.index}.{k}"] = v
        return grads

    def _last_probs(self, tape):
        # softmax probabilities are recomputed from the cached input of the last layer
        last = self.layers[-1]
        probs, _ = last.forward(self.layer_params(last.index), {}, tape.caches[-1], None)
        return probs

    def predict_proba(self, x, batch_size=1024):
        x = self._check_input(x)
        return np.concatenate([self.forward(x[i:i + batch_size]).probabilities for i in range(0, len(x), batch_size)])

    def embed(self, x, batch_size=1024):
        x = self._check_input(x)
        return np.concatenate(
            [self.forward(x[i:i + batch_size], tap=True).embeddings for i in range(0, len(x), batch_size)]
        )

    def copy(self):
        other = copy.deepcopy(self)
        return other

    def frozen(self):
        """Copy with the dwcca projection frozen."""
        other = self.copy()
        for k, v in other.buffers.items():
            if isinstance(v, dwcca_layer.ProjectionState):
                other.buffers[k] = v.frozen()
        return other

    def n_parameters(self):
        return int(sum(v.size for v in self.params.values()))


def cross_entropy(probs, labels):
    labels = np.asarray(labels)
    return float(-np.mean(np.log(np.clip(probs[np.arange(len(labels)), labels], 1e-300, None))))


def build_model(cfg: ModelConfig, seed=0):
    """Deterministically initialize a network: fan-in-scaled uniform weights, zero biases,
    unit/zero batchnorm scale/shift, identity DWCCA projection."""
    layers = build_layers(cfg)
    rng = np.random.default_rng([seed, 0])
    params, buffers = {}, {}
    for lay in layers:
        for k, v in lay.init_params(rng).items():
            params[f"{lay.index}.{k}"] = v
        for k, v in lay.init_buffers().items():
            buffers[f"{lay.index}.{k}"] = v
    return Network(cfg, params, buffers, seed)
