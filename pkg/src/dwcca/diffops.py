"""Vector-Jacobian products for the matrix operations on the DWCCA gradient path.

There is no general autodiff graph: each rule takes the forward values it
needs and a cotangent, and returns cotangents for the inputs. Rules whose
primal input is symmetric return a symmetric cotangent; the matching
finite-difference oracle evaluates ``f((X + X.T) / 2)`` so that both sides
agree on that convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateClass, DimensionMismatch, DwccaError, SingularFactor
from .linalg import as_matrix, cholesky_lower, spd_inverse, symmetrize

FD_STEP = 1e-5


def matmul_vjp(a, b, gy):
    """Cotangents of ``y = a @ b``: ``(gy @ b.T, a.T @ gy)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    gy = np.asarray(gy, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionMismatch(f"cannot multiply {a.shape} by {b.shape}")
    if gy.shape != (a.shape[0], b.shape[1]):
        raise DimensionMismatch(f"cotangent shape {gy.shape} != output shape {(a.shape[0], b.shape[1])}")
    return gy @ b.T, a.T @ gy


def spd_inverse_vjp(a, gy, a_inv=None):
    """Cotangent of ``y = inv(a)`` for SPD ``a``: ``-inv(a).T @ gy @ inv(a).T``, symmetrized."""
    gy = as_matrix(gy, "cotangent")
    if a_inv is None:
        a_inv = spd_inverse(a)
    if gy.shape != a_inv.shape:
        raise DimensionMismatch(f"cotangent shape {gy.shape} != {a_inv.shape}")
    return symmetrize(-a_inv.T @ gy @ a_inv.T)


def cholesky_vjp(l, gl):
    """Cotangent of ``l = cholesky_lower(a)`` with respect to ``a``.

    Only the lower triangle of ``gl`` is read. Uses the symmetric
    level-3 rule ``sym(L^-T Phi(L^T gL) L^-1)`` where ``Phi`` keeps the lower
    triangle and halves the diagonal.
    """
    l = as_matrix(l, "factor")
    gl = np.tril(as_matrix(gl, "cotangent"))
    if gl.shape != l.shape or l.shape[0] != l.shape[1]:
        raise DimensionMismatch(f"factor {l.shape} and cotangent {gl.shape} must be equal squares")
    diag = np.diag(l)
    if np.any(diag < 1e-12):
        raise SingularFactor(f"Cholesky factor has a diagonal entry of {diag.min():.3e}")
    phi = np.tril(l.T @ gl)
    phi[np.diag_indices_from(phi)] *= 0.5
    # L^-T phi L^-1 via two triangular solves
    tmp = solve_triangular(l, phi, lower=True, trans="T")
    s = solve_triangular(l, tmp.T, lower=True, trans="T").T
    return symmetrize(s)


def _class_groups(labels, n):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionMismatch(f"expected {n} labels, got shape {labels.shape}")
    classes = np.unique(labels)
    return [np.flatnonzero(labels == c) for c in classes], classes


def within_class_cov(w, labels):
    """Class-averaged within-class covariance, each class normalized by 1/N_c.

    Classes that do not appear in ``labels`` do not count toward the average.

    Raises
    ------
    DegenerateClass
        If any present class has fewer than two samples.
    """
    w = as_matrix(w, "w")
    groups, classes = _class_groups(labels, w.shape[0])
    d = w.shape[1]
    s = np.zeros((d, d))
    for c, idx in zip(classes, groups):
        if idx.size < 2:
            raise DegenerateClass(f"class {c} has {idx.size} sample(s); need at least 2")
        xc = w[idx] - w[idx].mean(axis=0)
        s += xc.T @ xc / idx.size
    return symmetrize(s / len(groups))


def within_class_cov_vjp(w, labels, gs):
    """Cotangent of :func:`within_class_cov` with respect to the samples.

    The class-mean path contributes nothing because centered rows sum to
    zero, leaving ``2 / (C N_c) * (w_i - mean_c) @ sym(gs)`` per row.
    """
    w = as_matrix(w, "w")
    gs = symmetrize(as_matrix(gs, "cotangent"))
    groups, classes = _class_groups(labels, w.shape[0])
    if gs.shape != (w.shape[1], w.shape[1]):
        raise DimensionMismatch(f"cotangent shape {gs.shape} does not match dimension {w.shape[1]}")
    gw = np.zeros_like(w)
    n_classes = len(groups)
    for c, idx in zip(classes, groups):
        if idx.size < 2:
            raise DegenerateClass(f"class {c} has {idx.size} sample(s); need at least 2")
        xc = w[idx] - w[idx].mean(axis=0)
        gw[idx] = (2.0 / (n_classes * idx.size)) * (xc @ gs)
    return gw


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    op: str
    seed: int
    max_rel_err: float
    tol: float

    @property
    def passed(self):
        return bool(self.max_rel_err <= self.tol)

    def csv_row(self):
        return f"{self.op},{self.seed},{self.max_rel_err:.6e},{self.tol:g},{str(self.passed).lower()}"


def numerical_gradient(f, x, h=FD_STEP):
    """Central-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(g_ad, g_fd):
    return float(np.max(np.abs(g_ad - g_fd)) / (np.max(np.abs(g_fd)) + 1e-12))


def random_spd(rng, d, min_eig=0.1):
    """Random SPD matrix ``G.T G / d + min_eig * I``; smallest eigenvalue >= ``min_eig``."""
    g = rng.standard_normal((d, d))
    return symmetrize(g.T @ g / d + min_eig * np.eye(d))


def finite_diff_check(op, point, seed, tol, h=FD_STEP):
    """Compare an analytic gradient against central differences.

    ``point`` is a callable ``point(rng) -> (f, x, grad)`` producing a scalar
    loss ``f``, the evaluation point ``x`` and the analytic gradient at ``x``.
    Linear-algebra failures inside the probe (e.g. a perturbation leaving the
    positive definite cone) are reported as an infinite error, not raised.
    """
    rng = np.random.default_rng(seed)
    try:
        f, x, g_ad = point(rng)
        g_fd = numerical_gradient(f, x, h)
        err = relative_error(g_ad, g_fd)
    except DwccaError:
        err = float("inf")
    if not np.isfinite(err):
        err = float("inf")
    return GradCheckReport(op, int(seed), err, tol)


def _matmul_point(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    gy = rng.standard_normal((3, 2))
    ga, gb = matmul_vjp(a, b, gy)
    x = np.concatenate([a.ravel(), b.ravel()])

    def f(v):
        return float(np.sum(gy * (v[:12].reshape(3, 4) @ v[12:].reshape(4, 2))))

    return f, x, np.concatenate([ga.ravel(), gb.ravel()])


def _inverse_point(rng):
    a = random_spd(rng, 4)
    gy = rng.standard_normal((4, 4))
    return (lambda x: float(np.sum(gy * spd_inverse(symmetrize(x))))), a, spd_inverse_vjp(a, gy)


def _cholesky_point(rng):
    a = random_spd(rng, 5)
    gl = rng.standard_normal((5, 5))
    l = cholesky_lower(a)
    return (lambda x: float(np.sum(gl * cholesky_lower(symmetrize(x))))), a, cholesky_vjp(l, gl)


def _wcc_point(rng):
    labels = np.repeat(np.arange(3), 5)
    w = rng.standard_normal((15, 4)) + 3.0 * rng.standard_normal((3, 4))[labels]
    gs = rng.standard_normal((4, 4))
    return (lambda x: float(np.sum(gs * within_class_cov(x, labels)))), w, within_class_cov_vjp(w, labels, gs)


def wcc_projection(w, labels, ridge):
    """Forward of the composed chain ``cholesky(inv(S_w + ridge I))``; returns all intermediates."""
    s = within_class_cov(w, labels) + ridge * np.eye(w.shape[1])
    s_inv = spd_inverse(s)
    return s, s_inv, cholesky_lower(s_inv)


def wcc_projection_vjp(w, labels, intermediates, gb):
    s, s_inv, b = intermediates
    gs_inv = cholesky_vjp(b, gb)
    gs = spd_inverse_vjp(s, gs_inv, a_inv=s_inv)
    return within_class_cov_vjp(w, labels, gs)


def _pipeline_point(rng):
    labels = np.repeat(np.arange(3), 6)
    w = rng.standard_normal((18, 4)) + 3.0 * rng.standard_normal((3, 4))[labels]
    gb = rng.standard_normal((4, 4))
    ridge = 1e-4
    inter = wcc_projection(w, labels, ridge)

    def f(x):
        return float(np.sum(gb * wcc_projection(x, labels, ridge)[2]))

    return f, w, wcc_projection_vjp(w, labels, inter, gb)


# name -> (point factory, tolerance)
BASIC_CHECKS = {
    "matmul": (_matmul_point, 1e-7),
    "spd_inverse": (_inverse_point, 1e-5),
    "cholesky": (_cholesky_point, 1e-5),
    "within_class_cov": (_wcc_point, 1e-5),
    "wcc_pipeline": (_pipeline_point, 1e-5),
}
