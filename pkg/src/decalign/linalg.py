"""Dense linear-algebra kernels.

Thin, validated wrappers over LAPACK (via numpy) for the handful of
factorizations the alignment code needs. Everything is float64.
"""

from typing import NamedTuple

import numpy as np

from .exceptions import (
    EmptyInput,
    IndefiniteInput,
    NoConvergence,
    NonSymmetric,
    NotPositiveDefinite,
    ShapeMismatch,
)

SYMMETRY_TOL = 1e-10
PSD_CLAMP = 1e-10
INDEFINITE_TOL = 1e-6
JITTERS = (1e-9, 1e-7, 1e-5)


class SymEig(NamedTuple):
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def as_matrix(A, name="A"):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-d, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} contains non-finite entries")
    return A


def _check_symmetric(A, tol=SYMMETRY_TOL):
    if A.shape[0] != A.shape[1]:
        raise ShapeMismatch(f"matrix must be square, got shape {A.shape}")
    asym = np.max(np.abs(A - A.T)) if A.size else 0.0
    if asym > tol:
        raise NonSymmetric(f"asymmetry {asym:.3e} exceeds tolerance {tol:.1e}")


def sym_eig(A):
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Parameters
    ----------
    A : array-like, shape (n, n)
        Symmetric within ``1e-10`` elementwise.

    Returns
    -------
    SymEig
        ``eigenvalues`` in descending order and orthonormal ``eigenvectors``
        stored column-wise.
    """
    A = as_matrix(A)
    _check_symmetric(A)
    try:
        w, V = np.linalg.eigh(0.5 * (A + A.T))
    except np.linalg.LinAlgError as exc:
        raise NoConvergence(f"symmetric eigensolver failed: {exc}") from exc
    order = np.argsort(w)[::-1]
    return SymEig(w[order], V[:, order])


def sqrtm_psd(A):
    """Principal square root of a symmetric positive semi-definite matrix."""
    eig = sym_eig(A)
    w = eig.eigenvalues
    if w.size and w.min() < -INDEFINITE_TOL:
        raise IndefiniteInput(f"minimum eigenvalue {w.min():.3e} < -{INDEFINITE_TOL:g}")
    # round-off negatives (down to -1e-6) are treated as exact zeros
    w = np.where(w < 0.0, 0.0, w)
    V = eig.eigenvectors
    S = (V * np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def cholesky(A, return_logdet=False):
    """Lower Cholesky factor, retrying with diagonal jitter before failing.

    The log-determinant of the (possibly jittered) matrix is
    ``2 * sum(log(diag(L)))`` and is returned alongside ``L`` when
    ``return_logdet`` is set.
    """
    A = as_matrix(A)
    _check_symmetric(A)
    n = A.shape[0]
    L = None
    for eps in (0.0,) + JITTERS:
        try:
            L = np.linalg.cholesky(A + eps * np.eye(n) if eps else A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.diag(L) > 0.0):
            break
        L = None
    if L is None:
        raise NotPositiveDefinite(
            f"matrix not positive definite even with jitter {JITTERS[-1]:g}")
    if return_logdet:
        return L, 2.0 * float(np.sum(np.log(np.diag(L))))
    return L


def logsumexp(v, axis=None):
    """Numerically stable ``log(sum(exp(v)))``.

    Inputs may contain ``-inf``; an all ``-inf`` slice yields ``-inf``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise EmptyInput("logsumexp of an empty array")
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)
