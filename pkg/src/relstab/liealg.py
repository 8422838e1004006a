"""Finite-dimensional Lie algebras given by structure constants.

``c[i, j, k]`` is the coefficient of ``e_k`` in ``[e_i, e_j]``.  The
algebra carries an inner product ``Q`` used for orthogonality, minimum-norm
choices and the dual norm on ``g*``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from relstab.errors import ValidationError
from relstab.linalg import DEFAULT_RANK_TOL, Subspace, null_space

INVARIANCE_TOL = 1e-8
JACOBI_TOL = 1e-10


@dataclass(frozen=True)
class InvarianceReport:
    residual: float
    triple: tuple | None  # (eta_index, i, j) attaining the residual

    @property
    def accepted(self) -> bool:
        return self.residual < INVARIANCE_TOL


@dataclass(frozen=True)
class LieAlgebraSpec:
    structure_constants: np.ndarray
    inner_product: np.ndarray
    labels: tuple = ()
    rank_tol: float = DEFAULT_RANK_TOL
    _ad: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.structure_constants, dtype=float)
        d = c.shape[0] if c.ndim == 3 else 0
        c = c.reshape(d, d, d)
        q = np.asarray(self.inner_product, dtype=float).reshape(d, d)
        object.__setattr__(self, "structure_constants", c)
        object.__setattr__(self, "inner_product", q)
        if not self.labels:
            object.__setattr__(self, "labels", tuple(f"e{i + 1}" for i in range(d)))
        # ad[i] is the matrix of ad_{e_i}: (ad[i])[k, j] = c[i, j, k]
        object.__setattr__(self, "_ad", np.transpose(c, (0, 2, 1)).copy())

    @classmethod
    def from_triples(cls, dim: int, triples: Iterable[Sequence], inner_product=None,
                     labels: Sequence[str] = (), rank_tol: float = DEFAULT_RANK_TOL,
                     one_based: bool = True) -> "LieAlgebraSpec":
        """Build from sparse ``(i, j, k, value)`` triples with ``i < j``.

        The antisymmetric completion ``c[j, i, k] = -c[i, j, k]`` is applied here.
        """
        c = np.zeros((dim, dim, dim))
        off = 1 if one_based else 0
        for t in triples:
            i, j, k = (int(x) - off for x in t[:3])
            if not i < j:
                raise ValidationError("structure_constants", f"triple {tuple(t)} needs i < j")
            c[i, j, k] = float(t[3])
            c[j, i, k] = -float(t[3])
        q = np.eye(dim) if inner_product is None else inner_product
        return cls(c, q, tuple(labels), rank_tol)

    @property
    def dim(self) -> int:
        return self.structure_constants.shape[0]

    def bracket(self, x, y) -> np.ndarray:
        return np.einsum("i,j,ijk->k", np.asarray(x, float), np.asarray(y, float),
                         self.structure_constants)

    def ad(self, x) -> np.ndarray:
        """Matrix of ``y -> [x, y]``."""
        return np.einsum("i,ikj->kj", np.asarray(x, float), self._ad)

    def coadjoint_matrix(self, mu) -> np.ndarray:
        """``L`` with ``(ad*_xi mu)_j = (L xi)_j = sum_{i,k} xi_i c_ij^k mu_k``."""
        return np.einsum("ijk,k->ji", self.structure_constants, np.asarray(mu, float))

    # -- validation ------------------------------------------------------

    def antisymmetry_residual(self) -> float:
        c = self.structure_constants
        return float(np.max(np.abs(c + np.transpose(c, (1, 0, 2))), initial=0.0))

    def jacobi_residual(self) -> float:
        """Max over ``i, j, l, m`` of the cyclic Jacobi sum on basis elements."""
        c = self.structure_constants
        if self.dim == 0:
            return 0.0
        # [[e_i, e_j], e_l] component m = sum_k c_ij^k c_kl^m
        t = np.einsum("ijk,klm->ijlm", c, c)
        cyc = t + np.transpose(t, (1, 2, 0, 3)) + np.transpose(t, (2, 0, 1, 3))
        return float(np.max(np.abs(cyc)))

    def validate(self) -> None:
        if self.antisymmetry_residual() != 0.0:
            raise ValidationError("antisymmetry", "structure constants are not antisymmetric",
                                  self.antisymmetry_residual())
        jr = self.jacobi_residual()
        if not jr < JACOBI_TOL:
            raise ValidationError("jacobi", f"Jacobi identity residual {jr:.3e}", jr)
        q = self.inner_product
        if not np.allclose(q, q.T, rtol=0, atol=1e-14):
            raise ValidationError("inner_product", "inner product matrix is not symmetric")
        if self.dim and np.min(np.linalg.eigvalsh(q)) <= 0:
            raise ValidationError("inner_product", "inner product matrix is not positive definite")

    # -- subspaces -------------------------------------------------------

    def subspace(self, cols) -> Subspace:
        if self.dim == 0:
            return Subspace(np.zeros((0, 0)), np.zeros((0, 0)))
        cols = np.asarray(cols, dtype=float).reshape(self.dim, -1)
        return Subspace.from_columns(cols, self.inner_product)

    def full(self) -> Subspace:
        return self.subspace(np.eye(self.dim))

    def coadjoint_isotropy(self, mu) -> Subspace:
        """``g_mu = {xi : ad*_xi mu = 0}``."""
        return self.subspace(null_space(self.coadjoint_matrix(mu), self.rank_tol))

    def center(self) -> Subspace:
        # xi is central iff ad_xi = 0, i.e. sum_i xi_i c[i, j, k] = 0 for all j, k
        m = self.structure_constants.reshape(self.dim, -1).T
        return self.subspace(null_space(m, self.rank_tol))

    def orthogonal_complement(self, s: Subspace) -> Subspace:
        if s.rank == 0:
            return self.full()
        return self.subspace(null_space(s.basis.T @ self.inner_product, self.rank_tol))

    def check_invariance(self, sub: Subspace | None = None) -> InvarianceReport:
        """Infinitesimal ``Ad(H)``-invariance of ``Q`` for ``h = sub`` (default: all of g).

        Residual is ``max |<[eta, e_i], e_j>_Q + <e_i, [eta, e_j]>_Q|`` over
        basis vectors ``eta`` of ``sub``.
        """
        sub = self.full() if sub is None else sub
        q = self.inner_product
        worst, triple = 0.0, None
        for a in range(sub.rank):
            ad = self.ad(sub.basis[:, a])
            sym = ad.T @ q + q @ ad
            idx = np.unravel_index(np.argmax(np.abs(sym)), sym.shape) if sym.size else None
            if idx is not None and abs(sym[idx]) > worst:
                worst = float(abs(sym[idx]))
                triple = (a, int(idx[0]), int(idx[1]))
        return InvarianceReport(worst, triple)

    def dual_norm_sq(self, mu) -> float:
        mu = np.asarray(mu, dtype=float)
        if mu.size == 0:
            return 0.0
        return float(mu @ np.linalg.solve(self.inner_product, mu))


def so3(inner_product=None) -> LieAlgebraSpec:
    return LieAlgebraSpec.from_triples(
        3, [(1, 2, 3, 1.0), (2, 3, 1, 1.0), (1, 3, 2, -1.0)], inner_product)


def abelian(dim: int, inner_product=None) -> LieAlgebraSpec:
    return LieAlgebraSpec(np.zeros((dim, dim, dim)),
                          np.eye(dim) if inner_product is None else inner_product)
