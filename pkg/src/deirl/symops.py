"""Operator algebra on symmetric matrices and quadratic monomials.

Vectors of length ``n(n+1)/2`` are ordered row-major over the upper triangle:
``(1,1), (1,2), ..., (1,n), (2,2), ..., (n,n)``. ``vec_of_mat`` doubles the
off-diagonal entries and ``bilinear`` halves the symmetric cross terms, so that
``bilinear(x, y) @ vec_of_mat(P) == x @ P @ y`` for symmetric ``P``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SYM_TOL = 1e-9


def tri_dim(n: int) -> int:
    """Length of the vectorization of an ``n x n`` symmetric matrix."""
    return n * (n + 1) // 2


def tri_order(nbar: int) -> int:
    """Inverse of :func:`tri_dim`; raises if ``nbar`` is not triangular."""
    n = int(round((np.sqrt(8 * nbar + 1) - 1) / 2))
    if n < 1 or tri_dim(n) != nbar:
        raise ValueError(f"length {nbar} is not a triangular number")
    return n


@lru_cache(maxsize=None)
def _upper_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = np.triu_indices(n)
    rows.setflags(write=False)
    cols.setflags(write=False)
    return rows, cols


def vec_of_mat(P, sym_tol: float = SYM_TOL) -> np.ndarray:
    """Vectorize a symmetric matrix with doubled off-diagonal entries.

    The input is symmetrized as ``(P + P.T) / 2``. Asymmetry larger than
    ``sym_tol * ||P||_F`` is rejected rather than silently averaged away.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {P.shape}")
    asym = np.linalg.norm(P - P.T)
    if asym > sym_tol * max(np.linalg.norm(P), np.finfo(float).tiny):
        raise ValueError(f"matrix is not symmetric (||P - P^T||_F = {asym:.3e})")
    Ps = 0.5 * (P + P.T)
    rows, cols = _upper_indices(P.shape[0])
    scale = np.where(rows == cols, 1.0, 2.0)
    return scale * Ps[rows, cols]


def mat_of_vec(v) -> np.ndarray:
    """Inverse of :func:`vec_of_mat` on the symmetric matrices."""
    v = np.asarray(v, dtype=float)
    if v.ndim != 1:
        raise ValueError("expected a 1-D vector")
    n = tri_order(v.size)
    rows, cols = _upper_indices(n)
    P = np.zeros((n, n))
    vals = np.where(rows == cols, v, 0.5 * v)
    P[rows, cols] = vals
    P[cols, rows] = vals
    return P


def bilinear(x, y) -> np.ndarray:
    """Symmetric bilinear form into the quadratic-monomial coordinates.

    Entry ``(i, i)`` is ``x_i y_i`` and entry ``(i, j)``, ``i < j``, is
    ``(x_i y_j + x_j y_i) / 2``. Leading axes broadcast, so a trajectory of
    shape ``(N, n)`` maps to ``(N, n(n+1)/2)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape[-1] != y.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {y.shape[-1]}")
    rows, cols = _upper_indices(x.shape[-1])
    return 0.5 * (x[..., rows] * y[..., cols] + x[..., cols] * y[..., rows])


@dataclass(frozen=True)
class CompressionMatrix:
    """``W`` with ``bilinear(x, y) == W @ kron(x, y)`` and its right inverse."""

    n: int
    W: np.ndarray
    W_rinv: np.ndarray


@lru_cache(maxsize=None)
def build_compression(n: int) -> CompressionMatrix:
    if n < 1:
        raise ValueError("n must be >= 1")
    rows, cols = _upper_indices(n)
    nbar = tri_dim(n)
    W = np.zeros((nbar, n * n))
    W_rinv = np.zeros((n * n, nbar))
    for k, (i, j) in enumerate(zip(rows, cols)):
        if i == j:
            W[k, i * n + i] = 1.0
            W_rinv[i * n + i, k] = 1.0
        else:
            W[k, i * n + j] = 0.5
            W[k, j * n + i] = 0.5
            # B(x,x)_k = x_i x_j fills both Kronecker slots
            W_rinv[i * n + j, k] = 1.0
            W_rinv[j * n + i, k] = 1.0
    W.setflags(write=False)
    W_rinv.setflags(write=False)
    return CompressionMatrix(n=n, W=W, W_rinv=W_rinv)


def delta_matrix(x_samples, y_samples=None) -> np.ndarray:
    """Rows ``bilinear(x_k + y_{k-1}, x_k - y_{k-1})`` over consecutive samples.

    With ``y_samples`` omitted this is the quadratic-difference matrix whose
    row ``k`` dotted with ``vec_of_mat(P)`` gives ``x_k'Px_k - x_{k-1}'Px_{k-1}``.
    """
    x = np.atleast_2d(np.asarray(x_samples, dtype=float))
    y = x if y_samples is None else np.atleast_2d(np.asarray(y_samples, dtype=float))
    if x.shape != y.shape:
        raise ValueError("sample arrays must have the same shape")
    if x.shape[0] < 2:
        raise ValueError("need at least two samples")
    return bilinear(x[1:] + y[:-1], x[1:] - y[:-1])


def simpson_segments(t, f, per_segment: int) -> np.ndarray:
    """Composite Simpson integral of ``f`` over consecutive segments.

    ``t`` is a uniform grid whose length minus one is a multiple of
    ``per_segment`` (itself even); ``f`` has shape ``(len(t), ...)``.
    Returns one integral per segment.
    """
    t = np.asarray(t, dtype=float)
    f = np.asarray(f, dtype=float)
    if per_segment < 2 or per_segment % 2:
        raise ValueError("per_segment must be a positive even integer")
    npts = t.size
    if (npts - 1) % per_segment:
        raise ValueError("grid does not split into whole segments")
    if np.any(np.diff(t) <= 0):
        raise ValueError("time grid must be strictly increasing")
    h = (t[-1] - t[0]) / (npts - 1)
    w = np.ones(per_segment + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= h / 3.0
    nseg = (npts - 1) // per_segment
    idx = np.arange(nseg)[:, None] * per_segment + np.arange(per_segment + 1)[None, :]
    return np.einsum("sp...,p->s...", f[idx], w)


@dataclass(frozen=True)
class QuadratureResult:
    value: np.ndarray
    coarse: np.ndarray
    rel_change: float


def integrate_segments(t, f, per_segment: int) -> QuadratureResult:
    """Simpson on the full grid refined by one Richardson step against half resolution.

    ``value`` is the extrapolated integral ``(16 S_h - S_2h) / 15``; ``coarse``
    is ``S_2h``. ``rel_change`` measures ``|value - S_h|`` against the largest
    integral magnitude and serves as the grid-refinement check.
    """
    fine = simpson_segments(t, f, per_segment)
    if per_segment % 4 == 0:
        coarse = simpson_segments(t[::2], np.asarray(f)[::2], per_segment // 2)
        value = (16.0 * fine - coarse) / 15.0
    else:
        coarse = fine
        value = fine
    scale = max(np.max(np.abs(value)), np.finfo(float).tiny)
    return QuadratureResult(value=value, coarse=coarse, rel_change=float(np.max(np.abs(value - fine)) / scale))


def integral_matrix(t, a, b, per_segment: int) -> np.ndarray:
    """Rows ``int bilinear(a, b) dt`` over each sample interval of a uniform inner grid."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape[0] != np.asarray(t).size or b.shape[0] != a.shape[0]:
        raise ValueError("signal samples must align with the time grid")
    return integrate_segments(t, bilinear(a, b), per_segment).value
