"""Rank-thresholded subspace helpers shared by the analysis modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_RANK_TOL = 1e-10


def null_space(a: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis (columns) of ``ker a`` with threshold ``rel_tol * sigma_max``."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    m, n = a.shape
    if m == 0 or n == 0:
        return np.eye(n)
    _, s, vt = np.linalg.svd(a)
    rank = _rank(s, rel_tol)
    return vt[rank:].T.copy()


def range_space(a: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> np.ndarray:
    """Orthonormal basis (columns) of the column space of ``a``."""
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], 0))
    u, s, _ = np.linalg.svd(a, full_matrices=False)
    return u[:, : _rank(s, rel_tol)].copy()


def _rank(s: np.ndarray, rel_tol: float) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def rank(a: np.ndarray, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.size == 0:
        return 0
    return _rank(np.linalg.svd(a, compute_uv=False), rel_tol)


def orthonormalize(basis: np.ndarray, metric: np.ndarray | None = None) -> np.ndarray:
    """Return ``B (B^T G B)^{-1/2}`` so columns are ``G``-orthonormal."""
    basis = np.asarray(basis, dtype=float)
    if basis.shape[1] == 0:
        return basis.copy()
    g = np.eye(basis.shape[0]) if metric is None else metric
    gram = basis.T @ g @ basis
    w, v = np.linalg.eigh(gram)
    return basis @ (v / np.sqrt(w)) @ v.T


def subspace_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Spectral-norm distance between the orthogonal projectors onto two column spaces."""
    pa = a @ a.T if a.shape[1] else np.zeros((a.shape[0],) * 2)
    pb = b @ b.T if b.shape[1] else np.zeros((b.shape[0],) * 2)
    return float(np.linalg.norm(pa - pb, 2))


@dataclass(frozen=True)
class Subspace:
    """Subspace of a ``dim``-dimensional space with a basis orthonormal for ``metric``."""

    basis: np.ndarray
    metric: np.ndarray

    @classmethod
    def from_columns(cls, cols: np.ndarray, metric: np.ndarray | None = None) -> "Subspace":
        cols = np.asarray(cols, dtype=float)
        metric = np.eye(cols.shape[0]) if metric is None else np.asarray(metric, dtype=float)
        return cls(orthonormalize(cols, metric), metric)

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def projector(self) -> np.ndarray:
        return self.basis @ self.basis.T @ self.metric

    def contains(self, v: np.ndarray, tol: float = 1e-10) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.linalg.norm(v - self.projector() @ v) <= tol * max(1.0, np.linalg.norm(v)))
