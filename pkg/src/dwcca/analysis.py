"""Representation diagnostics: per-class covariance eigen-spectra, k-nearest
neighbour accuracy on embeddings, 2-D PCA export and class-wise f1.

Every report serializes to CSV and to a JSON list of records with the same
field names:

=========================== ==============================
``eigenspectra.csv``         class, rank, eigenvalue
``eigenspectra_summary.csv`` rank, mean, variance
``knn.csv``                  k, accuracy
``f1.csv``                   class, f1
``pca.csv``                  split, class, pc1, pc2
=========================== ==============================

Ranks are 1-based. Floats are written with ``repr`` so files round-trip
exactly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DegenerateClass, DimensionMismatch, EmptyTrainingSet, LengthMismatch
from .linalg import pca_fit, pca_project, sym_eigen, symmetrize

DEFAULT_K_GRID = tuple(range(1, 30, 2))


def _native(v):
    if isinstance(v, (float, np.floating)):
        return float(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def write_records(path, columns, rows):
    """Write ``rows`` as ``<path>.csv`` and the JSON mirror ``<path>.json``."""
    path = Path(path)
    rows = [[_native(v) for v in r] for r in rows]
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerows([[repr(v) if isinstance(v, float) else v for v in r] for r in rows])
    records = [dict(zip(columns, r)) for r in rows]
    path.with_suffix(".json").write_text(json.dumps(records, indent=1) + "\n")


# ---------------------------------------------------------------------------
# eigen-spectra
# ---------------------------------------------------------------------------


@dataclass
class EigenSpectrumReport:
    classes: np.ndarray
    eigenvalues: np.ndarray
    """``(C, d)``, each row sorted descending."""

    @property
    def rank_mean(self):
        return self.eigenvalues.mean(axis=0)

    @property
    def rank_variance(self):
        return self.eigenvalues.var(axis=0)

    @property
    def max_eigenvalue(self):
        return float(self.eigenvalues.max())

    def save(self, directory):
        directory = Path(directory)
        rows = [(int(c), r + 1, v) for c, vals in zip(self.classes, self.eigenvalues) for r, v in enumerate(vals)]
        write_records(directory / "eigenspectra", ("class", "rank", "eigenvalue"), rows)
        summary = [(r + 1, m, v) for r, (m, v) in enumerate(zip(self.rank_mean, self.rank_variance))]
        write_records(directory / "eigenspectra_summary", ("rank", "mean", "variance"), summary)


def class_covariance(x):
    xc = x - x.mean(axis=0)
    return symmetrize(xc.T @ xc / x.shape[0])


def class_cov_eigenspectra(embeddings, labels):
    """Sorted eigenvalues of each class's (1/N_c) embedding covariance."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.shape[0] != labels.shape[0]:
        raise LengthMismatch(f"{embeddings.shape[0]} embeddings but {labels.shape[0]} labels")
    classes = np.unique(labels)
    spectra = []
    for c in classes:
        x = embeddings[labels == c]
        if x.shape[0] < 2:
            raise DegenerateClass(f"class {c} has {x.shape[0]} sample(s); need at least 2")
        vals = sym_eigen(class_covariance(x)).eigenvalues
        spectra.append(np.where(vals < 0, 0.0, vals))
    return EigenSpectrumReport(classes, np.array(spectra))


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------


def _neighbour_order(train_x, query_x, metric, chunk=2048):
    train_x = np.asarray(train_x, dtype=np.float64)
    query_x = np.asarray(query_x, dtype=np.float64)
    if train_x.shape[0] == 0:
        raise EmptyTrainingSet("k-NN needs at least one training embedding")
    if train_x.shape[1] != query_x.shape[1]:
        raise DimensionMismatch(f"train dimension {train_x.shape[1]} != query dimension {query_x.shape[1]}")
    out = []
    for i in range(0, query_x.shape[0], chunk):
        dist = cdist(query_x[i:i + chunk], train_x, metric=metric)
        out.append(np.argsort(dist, axis=1, kind="stable"))
    return np.concatenate(out) if out else np.empty((0, train_x.shape[0]), dtype=np.int64)


def _vote(neighbour_labels, num_classes):
    """Majority vote per row; a tie goes to the tied class with the nearest member."""
    q, k = neighbour_labels.shape
    counts = np.zeros((q, num_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(q), k), neighbour_labels.ravel()), 1)
    best = counts.max(axis=1, keepdims=True)
    is_top = np.take_along_axis(counts, neighbour_labels, axis=1) == best
    first = np.argmax(is_top, axis=1)
    return neighbour_labels[np.arange(q), first]


def knn_classify(train_x, train_y, query_x, k, metric="euclidean"):
    """Predict labels of ``query_x`` from its ``k`` nearest training embeddings.

    ``metric`` is ``"euclidean"`` (default) or ``"cosine"``. Equidistant
    neighbours are ordered by their training index.
    """
    train_y = np.asarray(train_y)
    if len(train_y) == 0:
        raise EmptyTrainingSet("k-NN needs at least one training embedding")
    if not 1 <= k <= len(train_y):
        raise ValueError(f"k must lie in [1, {len(train_y)}], got {k}")
    order = _neighbour_order(train_x, query_x, metric)
    return _vote(train_y[order[:, :k]], int(train_y.max()) + 1)


@dataclass
class KnnCurve:
    ks: np.ndarray
    accuracies: np.ndarray

    def accuracy_at(self, k):
        return float(self.accuracies[list(self.ks).index(k)])

    def save(self, directory):
        write_records(Path(directory) / "knn", ("k", "accuracy"), list(zip(map(int, self.ks), self.accuracies)))


def knn_curve(train_x, train_y, eval_x, eval_y, ks=DEFAULT_K_GRID, metric="euclidean"):
    ks = np.asarray(sorted(set(int(k) for k in ks)))
    train_y = np.asarray(train_y)
    eval_y = np.asarray(eval_y)
    if len(train_y) == 0:
        raise EmptyTrainingSet("k-NN needs at least one training embedding")
    if ks.size == 0 or ks[0] < 1 or ks[-1] > len(train_y):
        raise ValueError(f"k values must lie in [1, {len(train_y)}]")
    order = _neighbour_order(train_x, eval_x, metric)
    c = int(max(train_y.max(), eval_y.max())) + 1
    accs = [float(np.mean(_vote(train_y[order[:, :k]], c) == eval_y)) for k in ks]
    return KnnCurve(ks, np.array(accs))


# ---------------------------------------------------------------------------
# f1 and PCA
# ---------------------------------------------------------------------------


@dataclass
class ClasswiseF1Report:
    f1: np.ndarray

    @property
    def macro(self):
        return float(np.mean(self.f1))

    def save(self, directory):
        write_records(Path(directory) / "f1", ("class", "f1"), list(enumerate(self.f1)))


def classwise_f1(y_true, y_pred, num_classes=None):
    """Per-class ``2PR / (P + R)``; a class with ``P + R == 0`` (or never seen) scores 0."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise LengthMismatch(f"{y_true.shape[0]} true labels but {y_pred.shape[0]} predictions")
    c = num_classes or int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    cm = np.zeros((c, c), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0)
    true_pos = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(pred_pos > 0, tp / pred_pos, 0.0)
        r = np.where(true_pos > 0, tp / true_pos, 0.0)
        f1 = np.where(p + r > 0, 2 * p * r / (p + r), 0.0)
    return ClasswiseF1Report(f1)


def export_pca_embedding(train_x, train_y, eval_x, eval_y, path=None):
    """Fit a 2-D PCA on the training embeddings and project both splits.

    Returns rows ``(split, class, pc1, pc2)``; with ``path`` they are also
    written as ``pca.csv`` / ``pca.json`` in that directory.
    """
    basis = pca_fit(train_x, k=2)
    rows = []
    for split, x, y in (("train", train_x, train_y), ("eval", eval_x, eval_y)):
        coords = pca_project(basis, x)
        if coords.shape[1] < 2:
            coords = np.pad(coords, ((0, 0), (0, 2 - coords.shape[1])))
        rows.extend((split, int(c), float(a), float(b)) for c, (a, b) in zip(y, coords))
    if path is not None:
        write_records(Path(path) / "pca", ("split", "class", "pc1", "pc2"), rows)
    return rows


def centroid_spread(rows, split="eval"):
    """Mean distance of ``split`` points to their class centroid in the PCA plane."""
    pts = [(c, np.array([a, b])) for s, c, a, b in rows if s == split]
    labels = np.array([c for c, _ in pts])
    xy = np.array([p for _, p in pts])
    dists = [np.linalg.norm(xy[labels == c] - xy[labels == c].mean(axis=0), axis=1) for c in np.unique(labels)]
    return float(np.mean(np.concatenate(dists)))
