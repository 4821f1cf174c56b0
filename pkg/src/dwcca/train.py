"""Training: stratified mini-batches, Adam, patience-based learning-rate
halving with best-checkpoint restore, k-fold cross-validation, late-fusion
calibration and probability averaging over fold models.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from . import layer as dwcca_layer
from .config import DwccaSpec, ModelConfig
from .errors import (
    ClassCountMismatch,
    DegenerateInput,
    FormatError,
    InfeasibleStratification,
    NonFiniteGradient,
)
from .nn import Network, build_model, cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    initial_lr: float = 1e-4
    batch_size: int = 75
    max_patience: int = 20
    alpha: float | None = None
    """Overrides the dwcca layer's alpha when set."""
    max_epochs: int = 500
    seed: int = 0
    min_lr: float = 1e-7

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be > 0")
        if self.max_patience < 1:
            raise ValueError("max_patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")

    def check_classes(self, classes):
        if self.batch_size < 2 * classes:
            raise InfeasibleStratification(
                f"batch_size {self.batch_size} < 2 x {classes} classes; batches cannot hold 2 samples per class"
            )

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _class_quotas(counts, batch_size, rng):
    n = counts.sum()
    ideal = batch_size * counts / n
    quota = np.maximum(np.floor(ideal).astype(np.int64), 2)
    quota[counts == 0] = 0
    present = counts > 0
    rest = batch_size - quota.sum()
    # ties in the fractional remainder are broken by a random class order
    order = rng.permutation(len(counts))
    frac = (ideal - np.floor(ideal))[order]
    ranked = order[np.lexsort((np.arange(len(order)), -frac))]
    ranked = [c for c in ranked if present[c]]
    i = 0
    while rest > 0:
        quota[ranked[i % len(ranked)]] += 1
        rest -= 1
        i += 1
    while rest < 0:
        c = int(np.argmax(np.where(quota > 2, quota, -1)))
        if quota[c] <= 2:
            break
        quota[c] -= 1
        rest += 1
    return quota


def stratified_batch_indices(labels, batch_size, rng, num_classes=None):
    """Index arrays of stratified batches for one epoch.

    Every batch has the same per-class composition (proportional to the class
    frequencies, at least two per present class) and no sample is used twice.
    Samples that do not fill a whole batch are left out of this epoch.
    """
    labels = np.asarray(labels)
    counts = np.bincount(labels, minlength=num_classes or 0)
    n_present = int(np.count_nonzero(counts))
    if batch_size < 2 * n_present:
        raise InfeasibleStratification(f"batch_size {batch_size} < 2 x {n_present} classes")
    quota = _class_quotas(counts, batch_size, rng)
    with np.errstate(divide="ignore"):
        per_class = np.where(quota > 0, counts // np.maximum(quota, 1), np.iinfo(np.int64).max)
    n_batches = int(per_class.min())
    if n_batches < 1:
        c = int(np.argmin(per_class))
        raise InfeasibleStratification(
            f"class {c} has {counts[c]} sample(s) but each batch needs {quota[c]}"
        )
    pools = {c: rng.permutation(np.flatnonzero(labels == c)) for c in np.flatnonzero(quota)}
    batches = []
    for b in range(n_batches):
        idx = np.concatenate([pools[c][b * quota[c]:(b + 1) * quota[c]] for c in pools])
        batches.append(rng.permutation(idx))
    return batches


def stratified_batches(dataset, batch_size, seed):
    rng = np.random.default_rng(seed)
    return [dataset.subset(i) for i in stratified_batch_indices(dataset.labels, batch_size, rng, dataset.num_classes)]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """In-place Adam update of ``params``; returns ``state`` with ``t`` advanced.

    All gradients are checked before anything is modified, so a
    :class:`NonFiniteGradient` leaves the parameters untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------------------
# schedule and fold training
# ---------------------------------------------------------------------------


class PatienceSchedule:
    """Learning rate halving after ``max_patience`` epochs without improvement.

    ``update`` returns ``"improved"``, ``"wait"`` or ``"halve"``. After a
    halving the caller restores the best checkpoint; patience restarts.
    """

    def __init__(self, lr, max_patience):
        self.lr = lr
        self.max_patience = max_patience
        self.best = -np.inf
        self.patience = 0

    def update(self, score):
        if score > self.best:
            self.best = score
            self.patience = 0
            return "improved"
        self.patience += 1
        if self.patience >= self.max_patience:
            self.lr /= 2.0
            self.patience = 0
            return "halve"
        return "wait"


@dataclass
class FoldResult:
    fold: int
    model: Network
    """Best-on-validation checkpoint."""
    val_accuracy: float
    metrics: list
    """Rows of (epoch, train_loss, val_acc, lr)."""
    calibrator: "Calibrator | None" = None


def accuracy(probs, labels):
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def model_inputs(net, batch):
    return batch.features.reshape((len(batch),) + net.cfg.input_shape)


def _apply_alpha(cfg, alpha):
    if alpha is None:
        return cfg
    layers = [DwccaSpec(alpha, s.ridge_epsilon) if s.type == "dwcca" else s for s in cfg.layers]
    return ModelConfig(cfg.input_shape, layers)


def _restore(net, best):
    net.params = {k: v.copy() for k, v in best.params.items()}
    net.buffers = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in best.buffers.items()}
    net.version += 1


def train_fold(model_cfg, train, val, train_cfg, fold=0):
    """Train one model and return its best-on-validation checkpoint.

    Each epoch runs over fresh stratified batches; validation accuracy drives
    a :class:`PatienceSchedule`. On a halving the best checkpoint is restored
    and the Adam moments reset. Training stops after ``max_epochs`` or once
    the learning rate drops below ``min_lr``.
    """
    cfg = _apply_alpha(model_cfg, train_cfg.alpha)
    train_cfg.check_classes(cfg.classes)
    net = build_model(cfg, train_cfg.seed)
    x_train = model_inputs(net, train)
    x_val = model_inputs(net, val)
    opt = AdamState()
    sched = PatienceSchedule(train_cfg.initial_lr, train_cfg.max_patience)
    best = net.copy()
    metrics = []
    for epoch in range(1, train_cfg.max_epochs + 1):
        lr = sched.lr
        batch_rng = np.random.default_rng([train_cfg.seed, epoch, 2])
        losses = []
        for idx in stratified_batch_indices(train.labels, train_cfg.batch_size, batch_rng, cfg.classes):
            yb = train.labels[idx]
            res = net.forward(x_train[idx], "train", labels=yb)
            losses.append(cross_entropy(res.probabilities, yb))
            grads = net.backward(res.tape, yb)
            adam_step(net.params, grads, opt, lr)
            net.version += 1
        val_acc = accuracy(net.predict_proba(x_val), val.labels)
        metrics.append((epoch, float(np.mean(losses)), val_acc, lr))
        action = sched.update(val_acc)
        if action == "improved":
            best = net.copy()
        elif action == "halve":
            _restore(net, best)
            opt = AdamState()
            log.debug("fold %d epoch %d: lr halved to %g", fold, epoch, sched.lr)
            if sched.lr < train_cfg.min_lr:
                break
    best.version = 0
    return FoldResult(fold, best.frozen(), float(sched.best), metrics)


def fold_seed(master_seed, fold):
    return int(np.random.SeedSequence([master_seed, fold]).generate_state(1)[0])


def _run_fold(args):
    model_cfg, train, val, train_cfg, fold, calibrate = args
    res = train_fold(model_cfg, train, val, train_cfg, fold)
    if calibrate:
        probs = res.model.predict_proba(model_inputs(res.model, val))
        res.calibrator = calibrate_late_fusion(probs, val.labels, res.model.classes)
    return res


def cross_validate(model_cfg, folds, train_cfg, calibrate=True, parallel=1):
    """Train one model per ``(train, val)`` fold with seeds derived from ``train_cfg.seed``.

    With ``calibrate`` each fold also gets a late-fusion calibrator fitted on
    its own validation predictions. ``parallel > 1`` runs folds in worker
    processes; results equal the serial run.
    """
    if len(folds) < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    jobs = [
        (model_cfg, tr, va, dataclasses.replace(train_cfg, seed=fold_seed(train_cfg.seed, k)), k, calibrate)
        for k, (tr, va) in enumerate(folds)
    ]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return list(pool.map(_run_fold, jobs))
    return [_run_fold(j) for j in jobs]


# ---------------------------------------------------------------------------
# ensembling and calibration
# ---------------------------------------------------------------------------


def average_probabilities(prob_list):
    shapes = {p.shape for p in prob_list}
    if len(shapes) != 1:
        raise ClassCountMismatch(f"probability arrays disagree in shape: {sorted(shapes)}")
    return np.mean(np.stack(prob_list), axis=0)


def ensemble_average(models, x, calibrators=None):
    """Mean of the fold models' probability rows, optionally after per-fold calibration."""
    classes = {m.classes for m in models}
    if len(classes) != 1:
        raise ClassCountMismatch(f"fold models disagree on class count: {sorted(classes)}")
    probs = [m.predict_proba(x) for m in models]
    if calibrators is not None:
        probs = [cal.transform(p) for cal, p in zip(calibrators, probs)]
    return average_probabilities(probs)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class Calibrator:
    """Multinomial logistic regression from model probabilities to labels."""

    W: np.ndarray
    b: np.ndarray

    def transform(self, probs):
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape[1] != self.W.shape[0]:
            raise ClassCountMismatch(f"calibrator expects {self.W.shape[0]} classes, got {probs.shape[1]}")
        return _softmax(probs @ self.W + self.b)


def calibrate_late_fusion(probs, labels, num_classes=None, l2=1e-4):
    """Fit a :class:`Calibrator` on one fold's validation predictions.

    Minimizes mean cross-entropy plus ``l2/2 * ||W||^2`` with L-BFGS.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    c = num_classes or probs.shape[1]
    if probs.shape[1] != c:
        raise ClassCountMismatch(f"{probs.shape[1]} probability columns for {c} classes")
    if np.unique(labels).size < 2:
        raise DegenerateInput("calibration needs validation labels from at least 2 classes")
    n = len(labels)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0

    def objective(theta):
        W = theta[: c * c].reshape(c, c)
        b = theta[c * c:]
        p = _softmax(probs @ W + b)
        loss = -np.sum(onehot * np.log(np.clip(p, 1e-300, None))) / n + 0.5 * l2 * np.sum(W * W)
        g = (p - onehot) / n
        gW = probs.T @ g + l2 * W
        return loss, np.concatenate([gW.ravel(), g.sum(axis=0)])

    res = minimize(objective, np.zeros(c * c + c), jac=True, method="L-BFGS-B", options={"maxiter": 1000})
    return Calibrator(res.x[: c * c].reshape(c, c).copy(), res.x[c * c:].copy())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"DWCK"
CKPT_VERSION = 1


def write_blocks(path, blocks):
    """Write named float64 arrays: magic, version u8, count u32, then per block
    ``name_len u16, name, ndim u8, dims u64[ndim], data f64[]`` (little-endian)."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(blocks)))
        for name, arr in blocks.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes(order="C"))


def read_blocks(path):
    data = Path(path).read_bytes()

    def take(fmt, off):
        size = struct.calcsize(fmt)
        if off + size > len(data):
            raise FormatError(f"{path}: truncated checkpoint", off)
        return struct.unpack_from(fmt, data, off), off + size

    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}", 0)
    (version, count), off = take("<BI", 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", 4)
    blocks = {}
    for _ in range(count):
        (nlen,), off = take("<H", off)
        if off + nlen > len(data):
            raise FormatError(f"{path}: truncated checkpoint", off)
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,), off = take("<B", off)
        shape, off = take(f"<{ndim}Q", off)
        size = int(np.prod(shape)) * 8
        if off + size > len(data):
            raise FormatError(f"{path}: truncated block {name!r}", off)
        blocks[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64)
        off += size
    return blocks


def save_checkpoint(net, path):
    blocks = {f"param:{k}": v for k, v in net.params.items()}
    for k, v in net.buffers.items():
        if isinstance(v, dwcca_layer.ProjectionState):
            blocks[f"buffer:{k}.b_bar"] = v.b_bar
            blocks[f"buffer:{k}.update_count"] = np.array(float(v.update_count))
            blocks[f"buffer:{k}.frozen"] = np.array(float(v.mode == dwcca_layer.FROZEN))
        else:
            blocks[f"buffer:{k}"] = v
    write_blocks(path, blocks)


def load_checkpoint(path, model_cfg):
    blocks = read_blocks(path)
    net = build_model(model_cfg, 0)
    for k in net.params:
        if f"param:{k}" not in blocks:
            raise FormatError(f"{path}: missing parameter {k!r}")
        if blocks[f"param:{k}"].shape != net.params[k].shape:
            raise FormatError(f"{path}: parameter {k!r} has shape {blocks[f'param:{k}'].shape}")
        net.params[k] = blocks[f"param:{k}"]
    for k, v in list(net.buffers.items()):
        if isinstance(v, dwcca_layer.ProjectionState):
            mode = dwcca_layer.FROZEN if blocks[f"buffer:{k}.frozen"] else dwcca_layer.TRAINING
            net.buffers[k] = dwcca_layer.ProjectionState(
                blocks[f"buffer:{k}.b_bar"], int(blocks[f"buffer:{k}.update_count"].item()), mode
            )
        else:
            net.buffers[k] = blocks[f"buffer:{k}"]
    return net


def save_calibrator(cal, path):
    write_blocks(path, {"W": cal.W, "b": cal.b})


def load_calibrator(path):
    blocks = read_blocks(path)
    return Calibrator(blocks["W"], blocks["b"])


METRICS_COLUMNS = ("epoch", "train_loss", "val_acc", "lr")


def write_fold(result, fold_dir, model_cfg, train_cfg):
    """``checkpoint.dwck``, ``metrics.csv``, ``config.snapshot`` (and ``calibrator.dwck``)."""
    fold_dir = Path(fold_dir)
    fold_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, fold_dir / "checkpoint.dwck")
    with open(fold_dir / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for epoch, loss, acc, lr in result.metrics:
            w.writerow([epoch, repr(loss), repr(acc), repr(lr)])
    snapshot = {
        "model": result.model.cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "fold": result.fold,
        "val_accuracy": result.val_accuracy,
    }
    (fold_dir / "config.snapshot").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    if result.calibrator is not None:
        save_calibrator(result.calibrator, fold_dir / "calibrator.dwck")


def read_fold(fold_dir):
    """Return ``(model, calibrator or None, snapshot dict)`` from a fold directory."""
    fold_dir = Path(fold_dir)
    snap = json.loads((fold_dir / "config.snapshot").read_text())
    cfg = ModelConfig.from_dict(snap["model"])
    model = load_checkpoint(fold_dir / "checkpoint.dwck", cfg)
    cal_path = fold_dir / "calibrator.dwck"
    cal = load_calibrator(cal_path) if cal_path.exists() else None
    return model, cal, snap

