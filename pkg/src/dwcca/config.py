"""Model configuration files.

A model config is TOML (or the equivalent JSON) with an ``input_shape`` and
an ordered ``[[layers]]`` list; every layer table carries a ``type`` key plus
that layer's fields::

    input_shape = [16]

    [[layers]]
    type = "dense"
    units = 64

    [[layers]]
    type = "dwcca"
    alpha = 0.1
    ridge_epsilon = 1e-4

    [[layers]]
    type = "softmax_output"
    classes = 8

Layer types and fields:

==================== ===============================================
``conv2d``            ``kernel`` (int or [h, w]), ``channels``,
                      ``pad`` (default 0), ``stride`` (default 1)
``dense``             ``units``
``batchnorm``         (none)
``relu``              (none)
``maxpool``           ``size`` (int or [h, w])
``dropout``           ``rate``
``global_average_pool`` (none)
``dwcca``             ``alpha`` (default 0.1), ``ridge_epsilon`` (default 1e-4)
``softmax_output``    ``classes``, ``linear`` (default true: learned
                      dense projection before the softmax; false applies
                      the softmax directly to the incoming features)
==================== ===============================================
"""
from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def _pair(v, name):
    if isinstance(v, int):
        return (v, v)
    if isinstance(v, (list, tuple)) and len(v) == 2 and all(isinstance(i, int) for i in v):
        return tuple(v)
    raise ConfigError(f"{name} must be an int or a pair of ints, got {v!r}")


@dataclass(frozen=True)
class Conv2dSpec:
    channels: int
    kernel: tuple = (3, 3)
    pad: int = 0
    stride: int = 1
    type: str = field(default="conv2d", init=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel, "kernel"))
        if self.channels < 1 or self.stride < 1 or self.pad < 0 or min(self.kernel) < 1:
            raise ConfigError(f"invalid conv2d spec {self}")


@dataclass(frozen=True)
class DenseSpec:
    units: int
    type: str = field(default="dense", init=False)

    def __post_init__(self):
        if self.units < 1:
            raise ConfigError("dense units must be >= 1")


@dataclass(frozen=True)
class BatchNormSpec:
    type: str = field(default="batchnorm", init=False)


@dataclass(frozen=True)
class ReluSpec:
    type: str = field(default="relu", init=False)


@dataclass(frozen=True)
class MaxPoolSpec:
    size: tuple = (2, 2)
    type: str = field(default="maxpool", init=False)

    def __post_init__(self):
        object.__setattr__(self, "size", _pair(self.size, "size"))


@dataclass(frozen=True)
class DropoutSpec:
    rate: float
    type: str = field(default="dropout", init=False)

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class GlobalAveragePoolSpec:
    type: str = field(default="global_average_pool", init=False)


@dataclass(frozen=True)
class DwccaSpec:
    alpha: float = 0.1
    ridge_epsilon: float = 1e-4
    type: str = field(default="dwcca", init=False)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigError(f"dwcca alpha must lie in (0, 1], got {self.alpha}")
        if self.ridge_epsilon < 0:
            raise ConfigError("dwcca ridge_epsilon must be >= 0")


@dataclass(frozen=True)
class SoftmaxOutputSpec:
    classes: int
    linear: bool = True
    type: str = field(default="softmax_output", init=False)

    def __post_init__(self):
        if self.classes < 2:
            raise ConfigError("softmax_output needs at least 2 classes")


LAYER_SPECS = {
    cls.__dataclass_fields__["type"].default: cls
    for cls in (
        Conv2dSpec,
        DenseSpec,
        BatchNormSpec,
        ReluSpec,
        MaxPoolSpec,
        DropoutSpec,
        GlobalAveragePoolSpec,
        DwccaSpec,
        SoftmaxOutputSpec,
    )
}


def layer_from_dict(d, index):
    d = dict(d)
    kind = d.pop("type", None)
    if kind not in LAYER_SPECS:
        raise ConfigError(f"layer {index}: unknown layer type {kind!r}")
    cls = LAYER_SPECS[kind]
    allowed = {f.name for f in fields(cls) if f.init}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"layer {index} ({kind}): unknown field(s) {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"layer {index} ({kind}): {exc}") from None


def layer_to_dict(spec):
    d = {"type": spec.type}
    d.update({k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items() if k != "type"})
    return d


@dataclass(frozen=True)
class ModelConfig:
    input_shape: tuple
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(i) for i in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.input_shape or min(self.input_shape) < 1:
            raise ConfigError(f"invalid input_shape {self.input_shape}")
        kinds = [spec.type for spec in self.layers]
        if kinds.count("dwcca") > 1:
            raise ConfigError("at most one dwcca layer is allowed")
        if kinds.count("softmax_output") != 1 or kinds[-1] != "softmax_output":
            raise ConfigError("exactly one softmax_output layer is required and it must be last")

    @property
    def classes(self):
        return self.layers[-1].classes

    @property
    def has_dwcca(self):
        return any(spec.type == "dwcca" for spec in self.layers)

    def without_dwcca(self):
        return ModelConfig(self.input_shape, [s for s in self.layers if s.type != "dwcca"])

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "layers": [layer_to_dict(s) for s in self.layers]}

    @classmethod
    def from_dict(cls, d):
        if "input_shape" not in d or "layers" not in d:
            raise ConfigError("model config needs 'input_shape' and 'layers'")
        return cls(d["input_shape"], [layer_from_dict(l, i) for i, l in enumerate(d["layers"])])


def load_model_config(path):
    path = Path(path)
    text = path.read_text()
    try:
        d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ModelConfig.from_dict(d)


def dense_model_config(input_dim, classes, hidden=64, embedding=16, dwcca=True, alpha=0.1, ridge_epsilon=1e-4):
    """``dense(hidden) - relu - dense(embedding) - [dwcca] - softmax_output(classes)``."""
    layers = [DenseSpec(hidden), ReluSpec(), DenseSpec(embedding)]
    if dwcca:
        layers.append(DwccaSpec(alpha=alpha, ridge_epsilon=ridge_epsilon))
    layers.append(SoftmaxOutputSpec(classes))
    return ModelConfig((input_dim,), layers)
