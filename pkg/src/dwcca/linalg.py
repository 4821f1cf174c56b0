"""Dense linear algebra kernels.

Everything here works on plain 2-D ``float64`` numpy arrays. The Cholesky
factorization and the Jacobi eigensolver are written out explicitly so that
pivot failures and convergence are reported with this package's exceptions
and results are bit-reproducible for a fixed input.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from .errors import DegenerateInput, DimensionMismatch, NoConvergence, NotPositiveDefinite

PIVOT_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
JACOBI_TOL = 1e-12


def as_matrix(a, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array, raising on anything else."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _as_square(a, name="matrix"):
    a = as_matrix(a, name)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {a.shape}")
    return a


def symmetrize(a):
    return 0.5 * (a + a.T)


def cholesky_lower(a, tol=PIVOT_TOL):
    """Lower-triangular ``L`` with ``L @ L.T == a``.

    Only the lower triangle of ``a`` is read.

    Raises
    ------
    NotPositiveDefinite
        If a pivot (the value whose square root becomes ``L[j, j]``) is
        ``<= tol``.
    """
    a = _as_square(a)
    n = a.shape[0]
    L = np.zeros_like(a)
    for j in range(n):
        row = L[j, :j]
        pivot = a[j, j] - row @ row
        if not pivot > tol:
            raise NotPositiveDefinite(
                f"Cholesky pivot {j} is {pivot:.3e} (<= {tol:g}); matrix is not "
                "positive definite, increase the ridge epsilon",
                pivot_index=j,
                pivot=pivot,
            )
        d = np.sqrt(pivot)
        L[j, j] = d
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ row) / d
    return L


def spd_inverse(a):
    """Inverse of a symmetric positive definite matrix via its Cholesky factor.

    The result is symmetrized explicitly.
    """
    L = cholesky_lower(a)
    n = L.shape[0]
    Linv = solve_triangular(L, np.eye(n), lower=True)
    return symmetrize(Linv.T @ Linv)


class EigenDecomposition(NamedTuple):
    eigenvalues: np.ndarray
    """Sorted descending."""
    eigenvectors: np.ndarray
    """Columns are the unit eigenvectors matching ``eigenvalues``."""


def _fix_signs(vectors):
    # largest-magnitude component of each column made positive; first index wins ties
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eigen(a, max_sweeps=JACOBI_MAX_SWEEPS, tol=JACOBI_TOL):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps over all upper off-diagonal pairs until the off-diagonal Frobenius
    norm drops to ``tol * ||a||_F``.

    Raises
    ------
    NoConvergence
        If ``max_sweeps`` sweeps do not reach the tolerance.
    """
    A = _as_square(a).copy()
    n = A.shape[0]
    if not np.allclose(A, A.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise ValueError("sym_eigen requires a symmetric matrix")
    A = symmetrize(A)
    V = np.eye(n)
    threshold = tol * np.linalg.norm(A)

    off_mask = ~np.eye(n, dtype=bool)

    def off_norm():
        return np.linalg.norm(A[off_mask])

    sweeps = 0
    while off_norm() > threshold:
        if sweeps >= max_sweeps:
            raise NoConvergence(f"Jacobi eigensolver did not converge in {max_sweeps} sweeps")
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if apq == 0.0:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                    if theta < 0:
                        t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp = A[:, p].copy()
                cq = A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
        sweeps += 1

    values = np.diag(A).copy()
    order = np.argsort(-values, kind="stable")
    return EigenDecomposition(values[order], _fix_signs(V[:, order]))


class PCABasis(NamedTuple):
    mean: np.ndarray
    components: np.ndarray
    """``d x k`` with orthonormal columns, highest variance first."""
    explained_variance: np.ndarray


def pca_fit(x, k=2):
    """Fit a ``k``-component PCA basis from the (1/n) sample covariance of ``x``."""
    x = as_matrix(x, "x")
    n, d = x.shape
    if n < 2:
        raise DegenerateInput(f"PCA needs at least 2 rows, got {n}")
    k = min(k, d)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = symmetrize(xc.T @ xc / n)
    eig = sym_eigen(cov)
    return PCABasis(mean, eig.eigenvectors[:, :k], np.clip(eig.eigenvalues[:k], 0.0, None))


def pca_project(basis, x):
    x = as_matrix(x, "x")
    if x.shape[1] != basis.mean.shape[0]:
        raise DimensionMismatch(
            f"x has {x.shape[1]} columns but the PCA basis has dimension {basis.mean.shape[0]}"
        )
    return (x - basis.mean) @ basis.components
