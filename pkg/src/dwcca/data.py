"""Datasets: the DWDS binary format, CSV fallback, stratified folds and the
synthetic shifted-Gaussian benchmark.

DWDS layout (all little-endian)::

    offset  size     field
    0       4        magic b"DWDS"
    4       1        version (u8, currently 1)
    5       8        n, sample count (u64)
    13      8        d, feature count (u64)
    21      4        C, class count (u32)
    25      4 n      labels (u32)
    25+4n   8 n d    features, row-major (f64)

Image-like inputs are stored flattened (``d = channels * height * width``)
and reshaped by the model config.

Random numbers come from numpy's ``PCG64`` bit generator
(``numpy.random.default_rng(seed)``), whose stream is fixed for a given seed.
"""
from __future__ import annotations

import json
import struct
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, InfeasibleSplit, InvalidSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

MAGIC = b"DWDS"
VERSION = 1
_HEADER = struct.Struct("<4sBQQI")


@dataclass
class LabeledBatch:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but labels of shape {self.labels.shape}"
            )
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def flat_features(self):
        return self.features.reshape(len(self), int(np.prod(self.features.shape[1:])))

    def subset(self, idx):
        return LabeledBatch(self.features[idx], self.labels[idx], self.num_classes)

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def concatenate(*batches):
    c = max(b.num_classes for b in batches)
    return LabeledBatch(
        np.concatenate([b.features for b in batches]), np.concatenate([b.labels for b in batches]), c
    )


def save_dataset(batch, path):
    x = np.ascontiguousarray(batch.flat_features, dtype="<f8")
    n, d = x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, d, batch.num_classes))
        fh.write(batch.labels.astype("<u4").tobytes())
        fh.write(x.tobytes())


def load_dataset(path):
    """Read a DWDS file (or a CSV file when the name ends in ``.csv``)."""
    path = Path(path)
    if path.suffix == ".csv":
        return load_csv(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(data)} bytes)", len(data))
    magic, version, n, d, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}", 4)
    off = _HEADER.size
    need = off + 4 * n + 8 * n * d
    if len(data) < need:
        raise FormatError(f"{path}: truncated body, expected {need} bytes, got {len(data)}", len(data))
    if len(data) > need:
        raise FormatError(f"{path}: {len(data) - need} trailing bytes", need)
    labels = np.frombuffer(data, dtype="<u4", count=n, offset=off).astype(np.int64)
    feats = np.frombuffer(data, dtype="<f8", count=n * d, offset=off + 4 * n).reshape(n, d).astype(np.float64)
    if n and labels.max() >= c:
        raise FormatError(f"{path}: label {labels.max()} >= class count {c}", off)
    return LabeledBatch(feats, labels, int(c))


def save_csv(batch, path):
    x = batch.flat_features
    header = "label," + ",".join(f"f{i}" for i in range(x.shape[1]))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for lab, row in zip(batch.labels, x):
            fh.write(f"{lab}," + ",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path, num_classes=None):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        if not header or header[0] != "label" or header[1:] != [f"f{i}" for i in range(len(header) - 1)]:
            raise FormatError(f"{path}: header must be label,f0,...", 0)
        rows = np.loadtxt(fh, delimiter=",", ndmin=2) if len(header) > 1 else np.empty((0, 1))
    return LabeledBatch(rows[:, 1:], rows[:, 0].astype(np.int64), num_classes)


@dataclass(frozen=True)
class ShiftSpec:
    """Knobs of the synthetic matched-vs-shifted benchmark.

    ``shift_magnitude`` displaces each class mean of the shifted test domain
    along a random unit direction (in units of the within-class standard
    deviation); ``covariance_scale`` multiplies its covariance.
    """

    class_count: int = 8
    dim: int = 16
    samples_per_class: int = 200
    shift_magnitude: float = 3.0
    covariance_scale: float = 2.0
    seed: int = 7

    def __post_init__(self):
        checks = {
            "class_count": self.class_count >= 2,
            "dim": self.dim >= 2,
            "samples_per_class": self.samples_per_class >= 2,
            "shift_magnitude": self.shift_magnitude >= 0,
            "covariance_scale": self.covariance_scale > 0,
        }
        for name, ok in checks.items():
            if not ok:
                raise InvalidSpec(name, f"value {getattr(self, name)!r} is out of range")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        for k in d:
            if k not in known:
                raise InvalidSpec(k, "unknown field")
        types = {"class_count": int, "dim": int, "samples_per_class": int, "seed": int,
                 "shift_magnitude": float, "covariance_scale": float}
        clean = {}
        for k, v in d.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (types[k] is int and not isinstance(v, int)):
                raise InvalidSpec(k, f"expected {types[k].__name__}, got {v!r}")
            clean[k] = types[k](v)
        return cls(**clean)

    @classmethod
    def load(cls, path):
        path = Path(path)
        text = path.read_text()
        d = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        return cls.from_dict(d)

    def to_dict(self):
        return asdict(self)


MEAN_RADIUS = 5.0
SPLITS = ("train", "val", "test_matched", "test_shifted")


def _unit_rows(rng, n, d):
    v = rng.standard_normal((n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_shifted_gaussians(spec=None):
    """Return ``(train, val, test_matched, test_shifted)``.

    Class means lie on a sphere of radius 5. The first three splits are unit
    covariance Gaussians around those means; the shifted split moves every
    mean by ``shift_magnitude`` along a per-class random unit vector and
    scales the covariance by ``covariance_scale``. Rows are grouped by class.
    """
    spec = spec or ShiftSpec()
    rng = np.random.default_rng(spec.seed)
    c, d, n = spec.class_count, spec.dim, spec.samples_per_class
    means = MEAN_RADIUS * _unit_rows(rng, c, d)
    shift_dirs = _unit_rows(rng, c, d)
    labels = np.repeat(np.arange(c), n)

    def draw(centres, scale):
        return centres[labels] + np.sqrt(scale) * rng.standard_normal((c * n, d))

    out = [LabeledBatch(draw(means, 1.0), labels, c) for _ in range(3)]
    out.append(LabeledBatch(draw(means + spec.shift_magnitude * shift_dirs, spec.covariance_scale), labels, c))
    return tuple(out)


def stratified_fold_indices(labels, k, seed):
    """Index pairs ``(train_idx, val_idx)`` for ``k`` stratified folds.

    Each class is shuffled and dealt into ``k`` near-equal parts; the fold that
    receives a class's leftover samples rotates so fold sizes stay balanced.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise InfeasibleSplit(f"need at least 2 folds, got {k}")
    rng = np.random.default_rng(seed)
    parts = [[] for _ in range(k)]
    offset = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < k:
            raise InfeasibleSplit(f"class {c} has {idx.size} samples, fewer than {k} folds")
        idx = rng.permutation(idx)
        chunks = np.array_split(idx, k)
        for j, chunk in enumerate(chunks):
            parts[(j + offset) % k].append(chunk)
        offset += idx.size % k
    folds = []
    all_idx = np.arange(labels.size)
    for j in range(k):
        val = np.sort(np.concatenate(parts[j]))
        train = np.setdiff1d(all_idx, val, assume_unique=True)
        folds.append((train, val))
    return folds


def stratified_folds(dataset, k, seed):
    return [(dataset.subset(tr), dataset.subset(va)) for tr, va in stratified_fold_indices(dataset.labels, k, seed)]
