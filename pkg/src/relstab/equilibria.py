"""Relative equilibria: velocity recovery, Newton refinement, group orbits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from relstab.errors import NewtonError
from relstab.linalg import Subspace, null_space
from relstab.phasespace import SystemDef

RE_TOL = 1e-9
NEWTON_TOL = 1e-12


@dataclass(frozen=True)
class RelEquilibrium:
    point: np.ndarray
    xi: np.ndarray
    residual: float
    mu: np.ndarray
    isotropy: Subspace  # g_m
    coadjoint_defect: float  # |ad*_xi mu|; zero iff xi is in g_mu
    orthogonality_defect: float  # max |<xi, v>_Q| over an orthonormal basis of g_m
    iterations: int = 0

    @property
    def xi_in_g_mu(self) -> bool:
        return self.coadjoint_defect <= 1e-8 * max(1.0, float(np.linalg.norm(self.mu)))

    @property
    def xi_perp_g_m(self) -> bool:
        return self.orthogonality_defect <= 1e-10 * max(1.0, float(np.linalg.norm(self.xi)))

    def is_valid(self, tol: float = RE_TOL) -> bool:
        return self.residual < tol


def isotropy_algebra_of_point(sys: SystemDef, m) -> Subspace:
    """``g_m = {xi : xi_M(m) = 0}``."""
    alg = sys.algebra
    return alg.subspace(null_space(sys.orbit_matrix(m), alg.rank_tol))


def _min_norm_solve(sys: SystemDef, mat: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Least-squares solution of ``mat xi = rhs`` with minimum ``Q``-norm."""
    d = sys.algebra.dim
    if d == 0:
        return np.zeros(0)
    chol = np.linalg.cholesky(sys.algebra.inner_product)  # Q = L L^T
    linv_t = np.linalg.inv(chol).T
    scaled = mat @ linv_t
    eta = np.linalg.pinv(scaled, rcond=sys.algebra.rank_tol) @ rhs
    return linv_t @ eta


def solve_velocity(sys: SystemDef, m) -> tuple:
    """Return ``(xi, residual)`` minimizing ``|xi_M(m) - X_h(m)|``, minimum ``Q``-norm."""
    m = np.asarray(m, dtype=float)
    xh = sys.vector_field(m)
    b = sys.orbit_matrix(m)
    xi = _min_norm_solve(sys, b, xh)
    return xi, float(np.linalg.norm(b @ xi - xh))


def characterize(sys: SystemDef, m, xi=None, iterations: int = 0) -> RelEquilibrium:
    """Bundle a point and velocity (solved by minimum norm when ``xi`` is None)."""
    m = np.asarray(m, dtype=float)
    if xi is None:
        xi, res = solve_velocity(sys, m)
    else:
        xi = np.asarray(xi, dtype=float).reshape(sys.algebra.dim)
        res = float(np.linalg.norm(sys.generator_field(xi, m) - sys.vector_field(m)))
    mu = sys.moment_map(m)
    gm = isotropy_algebra_of_point(sys, m)
    coad = float(np.linalg.norm(sys.algebra.coadjoint_matrix(mu) @ xi)) if xi.size else 0.0
    orth = float(np.max(np.abs(gm.basis.T @ sys.algebra.inner_product @ xi), initial=0.0))
    return RelEquilibrium(m, xi, res, mu, gm, coad, orth, iterations)


def _residual_vec(sys: SystemDef, m, xi) -> np.ndarray:
    return sys.augmented_gradient(xi, m)


def refine_relative_equilibrium(sys: SystemDef, m0, xi0=None, tol: float = NEWTON_TOL,
                                max_iter: int = 50, freeze=()) -> RelEquilibrium:
    """Newton on ``F(m, xi) = grad(h - <Phi, xi>)(m)`` with ``xi`` kept ``Q``-orthogonal to ``g_m``.

    Steps are minimum-norm least-squares solutions, so families of relative
    equilibria (orbits, momentum levels) do not make the iteration singular.
    Coordinates listed in ``freeze`` (indices) are held fixed.

    Raises
    ------
    NewtonError
        On divergence, on a step that cannot reduce the residual (the
        unreachable direction is attached as ``null_vector``), or after
        ``max_iter`` iterations.
    """
    m = np.array(m0, dtype=float)
    xi = solve_velocity(sys, m)[0] if xi0 is None else np.array(xi0, dtype=float)
    free = np.ones(sys.dim, dtype=bool)
    free[list(freeze)] = False
    alg = sys.algebra
    start = None
    for it in range(max_iter + 1):
        gm = isotropy_algebra_of_point(sys, m)
        comp = alg.orthogonal_complement(gm).basis
        # gauge: freeze the g_m components of xi at zero
        xi = comp @ (comp.T @ alg.inner_product @ xi) if alg.dim else xi
        f = _residual_vec(sys, m, xi)
        norm = float(np.linalg.norm(f))
        start = norm if start is None else start
        if norm < tol:
            return characterize(sys, m, solve_velocity(sys, m)[0], it)
        if it == max_iter:
            break
        if not np.isfinite(norm) or norm > 1e6 * max(start, 1.0):
            raise NewtonError(f"Newton diverged (residual {norm:.3e})", iterations=it)
        jm = sys.augmented_hessian(xi, m)[:, free]
        jx = -sys.moment_jacobian(m).T @ comp if alg.dim else np.zeros((sys.dim, 0))
        jac = np.hstack([jm, jx])
        step, *_ = np.linalg.lstsq(jac, -f, rcond=1e-13)
        lin = float(np.linalg.norm(jac @ step + f))
        if lin > 0.5 * norm:
            # last left singular vector: the direction the Jacobian cannot reach
            null = np.linalg.svd(jac)[0][:, -1]
            raise NewtonError("singular Newton system: residual has a component outside the "
                              "range of the Jacobian", null_vector=null, iterations=it)
        m[free] += step[: free.sum()]
        if alg.dim:
            xi = xi + comp @ step[free.sum():]
    raise NewtonError(f"Newton did not converge in {max_iter} iterations "
                      f"(residual {norm:.3e})", iterations=max_iter)


def affine_exponential(sys: SystemDef, xi, t: float = 1.0) -> np.ndarray:
    """``(2n+1) x (2n+1)`` matrix of ``exp(t xi)`` acting on ``[z; 1]``."""
    a, b = sys.generator_affine(xi)
    big = np.zeros((sys.dim + 1, sys.dim + 1))
    big[:-1, :-1] = a
    big[:-1, -1] = b
    return scipy.linalg.expm(t * big)


def group_act(sys: SystemDef, xi, z, t: float = 1.0) -> np.ndarray:
    e = affine_exponential(sys, xi, t)
    return e[:-1, :-1] @ np.asarray(z, dtype=float) + e[:-1, -1]
