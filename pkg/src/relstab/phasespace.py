"""Flat symplectic phase spaces with affine symplectic group actions.

Conventions: ``omega(u, v) = u^T Omega v`` with ``Omega[q_i, p_i] = +1`` and
``Omega[p_i, q_i] = -1`` for each canonical pair, so ``omega = sum dq_i ^ dp_i``.
Hamiltonian vector fields are ``X_f = Omega grad f`` (``qdot = df/dp``,
``pdot = -df/dq``).  The moment component of a generator produces that
generator's vector field exactly, not its negative, and equivariance reads
``{Phi_i, Phi_j} = sum_k c_ij^k Phi_k``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from relstab import exprcalc as ec
from relstab.errors import ValidationError
from relstab.liealg import LieAlgebraSpec

SP_TOL = 1e-10
EQUIVARIANCE_TOL = 1e-8
INVARIANCE_TOL = 1e-8


@dataclass(frozen=True)
class PhaseSpace:
    """``R^{2n}`` with named coordinates, canonical pairs and angle flags.

    ``pairs`` lists ``(q_index, p_index)``; by default the first half of the
    names are positions and the second half their momenta.
    """

    names: tuple
    pairs: tuple = ()
    periodic: tuple = ()

    def __post_init__(self):
        names = tuple(self.names)
        if len(names) % 2 or len(set(names)) != len(names):
            raise ValidationError("phase_space", "need an even number of distinct coordinate names")
        n = len(names) // 2
        pairs = tuple(self.pairs) or tuple((i, i + n) for i in range(n))
        pairs = tuple((int(a), int(b)) for a, b in pairs)
        flat = sorted(i for p in pairs for i in p)
        if flat != list(range(len(names))):
            raise ValidationError("phase_space", "canonical pairs must cover every coordinate once")
        periodic = tuple(bool(x) for x in self.periodic) or (False,) * len(names)
        if len(periodic) != len(names):
            raise ValidationError("phase_space", "periodic flags must match the coordinate count")
        if any(periodic[p] for _, p in pairs):
            raise ValidationError("phase_space", "only position coordinates may be periodic")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "periodic", periodic)

    @property
    def dim(self) -> int:
        return len(self.names)

    @property
    def n(self) -> int:
        return self.dim // 2

    @cached_property
    def omega(self) -> np.ndarray:
        om = np.zeros((self.dim, self.dim))
        for q, p in self.pairs:
            om[q, p] = 1.0
            om[p, q] = -1.0
        return om

    @cached_property
    def periodic_mask(self) -> np.ndarray:
        return np.array(self.periodic, dtype=bool)

    def partner(self, i: int) -> int:
        for q, p in self.pairs:
            if q == i:
                return p
            if p == i:
                return q
        raise IndexError(i)

    def wrap_difference(self, dz: np.ndarray) -> np.ndarray:
        """Map periodic components of a difference into ``[-pi, pi)``."""
        dz = np.array(dz, dtype=float)
        if self.periodic_mask.any():
            dz[self.periodic_mask] = (dz[self.periodic_mask] + math.pi) % (2 * math.pi) - math.pi
        return dz

    def distance(self, z, w) -> float:
        return float(np.linalg.norm(self.wrap_difference(np.asarray(z) - np.asarray(w))))

    def random_points(self, count: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        pts = scale * rng.standard_normal((count, self.dim))
        if self.periodic_mask.any():
            pts[:, self.periodic_mask] = rng.uniform(0, 2 * math.pi, (count, self.periodic_mask.sum()))
        return pts


@dataclass(frozen=True)
class ActionGenerator:
    """Affine vector field ``xi_M(z) = A z + b`` of one basis element, plus a moment offset."""

    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float))
        object.__setattr__(self, "b", np.asarray(self.b, dtype=float).reshape(-1))

    def field(self, z) -> np.ndarray:
        return self.A @ np.asarray(z, dtype=float) + self.b

    def sp_residual(self, omega: np.ndarray) -> float:
        return float(np.max(np.abs(omega @ self.A + self.A.T @ omega), initial=0.0))


def assemble_moment_component(gen: ActionGenerator, omega: np.ndarray,
                              check: bool = True) -> ec.Expr:
    """``phi(z) = -1/2 z^T (Omega A) z - (Omega b) . z + c`` so that ``Omega grad phi = A z + b``."""
    if check:
        r = gen.sp_residual(omega)
        if not r < SP_TOL:
            raise ValidationError("sp_condition", f"generator is not infinitesimally symplectic "
                                  f"(residual {r:.3e})", r)
    s = omega @ gen.A
    s = 0.5 * (s + s.T)
    return ec.add(ec.quadratic_form(s, -0.5), ec.linear_form(-(omega @ gen.b)), ec.Const(gen.c))


def hamiltonian_vector_field(f: ec.Expr, z, omega: np.ndarray) -> np.ndarray:
    return omega @ ec.gradient(f, np.asarray(z, dtype=float))


def poisson_bracket(f: ec.Expr, g: ec.Expr, space: PhaseSpace) -> ec.Expr:
    """``{f, g} = sum_i (df/dq_i dg/dp_i - df/dp_i dg/dq_i)``."""
    terms = []
    for q, p in space.pairs:
        terms.append(ec.mul(ec.differentiate(f, q), ec.differentiate(g, p)))
        terms.append(ec.neg(ec.mul(ec.differentiate(f, p), ec.differentiate(g, q))))
    return ec.add(*terms)


@dataclass(frozen=True)
class EquivarianceReport:
    residual: float
    worst_pair: tuple | None
    constants: np.ndarray
    constant_consistent: bool

    @property
    def accepted(self) -> bool:
        return self.constant_consistent and self.residual < EQUIVARIANCE_TOL


@dataclass
class SystemDef:
    """One Hamiltonian system: phase space, algebra, generators, Hamiltonian.

    Construction assembles the moment components.  Call :func:`validate_system`
    (the loader does) before analysing.
    """

    space: PhaseSpace
    algebra: LieAlgebraSpec
    generators: list
    hamiltonian: ec.Expr
    name: str = ""
    proper_action: bool | None = None
    solve_constants: bool = True
    moment: list = field(init=False)

    def __post_init__(self):
        if len(self.generators) != self.algebra.dim:
            raise ValidationError("generators", f"expected {self.algebra.dim} generators, "
                                  f"got {len(self.generators)}")
        for k, g in enumerate(self.generators):
            if g.A.shape != (self.space.dim, self.space.dim) or g.b.shape != (self.space.dim,):
                raise ValidationError("generators", f"generator {k + 1} has the wrong shape")
        if ec.max_index(self.hamiltonian) >= self.space.dim:
            raise ValidationError("hamiltonian", "Hamiltonian references an unknown coordinate")
        self.moment = [assemble_moment_component(g, self.omega, check=False) for g in self.generators]
        self.equivariance = None
        if self.solve_constants and self.algebra.dim:
            self.equivariance = validate_equivariance(self)
            self.generators = [ActionGenerator(g.A, g.b, float(c))
                               for g, c in zip(self.generators, self.equivariance.constants)]
            self.moment = [assemble_moment_component(g, self.omega, check=False)
                           for g in self.generators]

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def omega(self) -> np.ndarray:
        return self.space.omega

    @cached_property
    def h(self) -> ec.CompiledFunction:
        return ec.CompiledFunction(self.hamiltonian, self.dim)

    @cached_property
    def phi(self) -> list:
        return [ec.CompiledFunction(m, self.dim) for m in self.moment]

    @cached_property
    def _phi_all(self):
        return ec.compile_exprs(self.moment) if self.moment else None

    @cached_property
    def _phi_all_batch(self):
        return ec.compile_exprs(self.moment, "numpy") if self.moment else None

    def generator_field(self, xi, z) -> np.ndarray:
        """``xi_M(z)`` for a coefficient vector ``xi``."""
        z = np.asarray(z, dtype=float)
        out = np.zeros(self.dim)
        for x, g in zip(np.asarray(xi, dtype=float), self.generators):
            out += x * g.field(z)
        return out

    def generator_affine(self, xi) -> tuple:
        xi = np.asarray(xi, dtype=float)
        a = sum((x * g.A for x, g in zip(xi, self.generators)), np.zeros((self.dim, self.dim)))
        b = sum((x * g.b for x, g in zip(xi, self.generators)), np.zeros(self.dim))
        return a, b

    def orbit_matrix(self, z) -> np.ndarray:
        """``2n x d`` matrix whose columns are ``(e_k)_M(z)``."""
        z = np.asarray(z, dtype=float)
        if not self.generators:
            return np.zeros((self.dim, 0))
        return np.column_stack([g.field(z) for g in self.generators])

    def vector_field(self, z) -> np.ndarray:
        return self.omega @ self.h.gradient(z)

    def moment_map(self, z) -> np.ndarray:
        if not self.moment:
            return np.zeros(0)
        return np.array(self._phi_all(tuple(float(v) for v in z)), dtype=float)

    def moment_map_batch(self, z: np.ndarray) -> np.ndarray:
        if not self.moment:
            return np.zeros((0,) + z.shape[1:])
        return ec._batch_call(self._phi_all_batch, z)

    def moment_norm_sq(self, z) -> float:
        return self.algebra.dual_norm_sq(self.moment_map(z))

    def moment_jacobian(self, z) -> np.ndarray:
        """``d x 2n``; row ``k`` is ``grad Phi_k = -Omega (A_k z + b_k)``."""
        if not self.generators:
            return np.zeros((0, self.dim))
        return np.vstack([f.gradient(z) for f in self.phi])

    def augmented(self, xi) -> ec.Expr:
        """``h - <Phi, xi>`` as an expression."""
        terms = [ec.mul(ec.Const(-float(x)), m) for x, m in zip(xi, self.moment) if x != 0.0]
        return ec.add(self.hamiltonian, *terms)

    def augmented_hessian(self, xi, z) -> np.ndarray:
        hess = self.h.hessian(z)
        for x, f in zip(np.asarray(xi, dtype=float), self.phi):
            if x != 0.0:
                hess = hess - x * f.hessian(z)
        return hess

    def augmented_gradient(self, xi, z) -> np.ndarray:
        g = self.h.gradient(z)
        for x, f in zip(np.asarray(xi, dtype=float), self.phi):
            if x != 0.0:
                g = g - x * f.gradient(z)
        return g


def validate_equivariance(sys: SystemDef, n_points: int = 200, seed: int = 0) -> EquivarianceReport:
    """Solve the moment constants, then measure ``{Phi_i,Phi_j} - sum_k c_ij^k Phi_k``.

    The constants are moved by the minimum-norm least-squares correction that
    cancels the constant part of each defect; user offsets are kept wherever
    the algebra leaves them free (e.g. abelian factors).
    """
    d = sys.algebra.dim
    c = sys.algebra.structure_constants
    base = [assemble_moment_component(ActionGenerator(g.A, g.b, 0.0), sys.omega, check=False)
            for g in sys.generators]
    user_c = np.array([g.c for g in sys.generators], dtype=float)
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    if not pairs:
        return EquivarianceReport(0.0, None, user_c, True)
    rng = np.random.default_rng(seed)
    pts = sys.space.random_points(n_points, rng)
    origin = np.zeros(sys.dim)
    defects = []
    kappa = np.zeros(len(pairs))
    consistent = True
    for row, (i, j) in enumerate(pairs):
        lin = [ec.mul(ec.Const(-c[i, j, k]), base[k]) for k in range(d) if c[i, j, k] != 0.0]
        defect = ec.add(poisson_bracket(base[i], base[j], sys.space), *lin)
        f = ec.compile_exprs([defect], "numpy")
        vals = ec._batch_call(f, pts.T)[0]
        kappa[row] = ec.evaluate(defect, origin)
        spread = float(np.max(np.abs(vals - kappa[row])))
        if spread > EQUIVARIANCE_TOL * max(1.0, float(np.max(np.abs(vals)))):
            consistent = False
        defects.append((i, j))
    # sum_k c_ij^k c_k = kappa_ij for each pair
    cmat = np.array([[c[i, j, k] for k in range(d)] for i, j in pairs])
    corr, *_ = np.linalg.lstsq(cmat, kappa - cmat @ user_c, rcond=None)
    consts = user_c + corr
    worst, worst_pair = 0.0, None
    moment = [ec.add(b, ec.Const(float(k))) for b, k in zip(base, consts)]
    for i, j in pairs:
        lin = [ec.mul(ec.Const(-c[i, j, k]), moment[k]) for k in range(d) if c[i, j, k] != 0.0]
        defect = ec.add(poisson_bracket(moment[i], moment[j], sys.space), *lin)
        vals = ec._batch_call(ec.compile_exprs([defect], "numpy"), pts.T)[0]
        r = float(np.max(np.abs(vals)))
        if r > worst or worst_pair is None:
            worst, worst_pair = r, (i, j)
    return EquivarianceReport(worst, worst_pair, consts, consistent)


def invariance_residual(sys: SystemDef, n_points: int = 100, seed: int = 1) -> tuple:
    """Max ``|dh(xi_M)|`` over generators and random points, and the derivative expressions."""
    grads = ec.gradient_exprs(sys.hamiltonian, sys.dim)
    rng = np.random.default_rng(seed)
    pts = sys.space.random_points(n_points, rng)
    worst, worst_k = 0.0, None
    exprs = []
    for k, g in enumerate(sys.generators):
        terms = []
        for r in range(sys.dim):
            comp = ec.linear_form(g.A[r], g.b[r])
            if not ec.is_const(comp, 0.0) and not ec.is_const(grads[r], 0.0):
                terms.append(ec.mul(comp, grads[r]))
        e = ec.add(*terms)
        exprs.append(e)
        vals = ec._batch_call(ec.compile_exprs([e], "numpy"), pts.T)[0]
        scale = max(1.0, float(np.max(np.abs(sys.h.value_batch(pts.T)))))
        r = float(np.max(np.abs(vals))) / scale
        if r > worst or worst_k is None:
            worst, worst_k = r, k
    return worst, worst_k, exprs


def noether_residual(sys: SystemDef, n_points: int = 100, seed: int = 2) -> float:
    """Max ``|{h, Phi_i}|`` at random points."""
    rng = np.random.default_rng(seed)
    pts = sys.space.random_points(n_points, rng)
    worst = 0.0
    for m in sys.moment:
        e = poisson_bracket(sys.hamiltonian, m, sys.space)
        vals = ec._batch_call(ec.compile_exprs([e], "numpy"), pts.T)[0]
        worst = max(worst, float(np.max(np.abs(vals))))
    return worst


def validate_system(sys: SystemDef, seed: int = 0) -> dict:
    """Run every load-time validator; raise :class:`ValidationError` on the first failure.

    Returns a dict of residuals for diagnostics.
    """
    sys.algebra.validate()
    om = sys.omega
    out = {"jacobi": sys.algebra.jacobi_residual()}
    sp = 0.0
    for k, g in enumerate(sys.generators):
        r = g.sp_residual(om)
        sp = max(sp, r)
        if not r < SP_TOL:
            raise ValidationError("sp_condition", f"generator {k + 1} is not infinitesimally "
                                  f"symplectic (residual {r:.3e})", r, detail={"generator": k + 1})
        per = sys.space.periodic_mask
        if per.any():
            if np.any(g.A[:, per] != 0.0):
                raise ValidationError("periodic", f"generator {k + 1} depends linearly on a "
                                      "periodic coordinate", detail={"generator": k + 1})
            partners = [sys.space.partner(i) for i in np.flatnonzero(per)]
            if np.any(g.b[partners] != 0.0):
                raise ValidationError("periodic", f"generator {k + 1} has a moment component "
                                      "linear in a periodic coordinate", detail={"generator": k + 1})
    out["sp_condition"] = sp
    rng = np.random.default_rng(seed)
    if sys.space.periodic_mask.any():
        pts = sys.space.random_points(100, rng)
        shift = 2 * math.pi * sys.space.periodic_mask
        for z in pts:
            a, b = sys.h.value(z), sys.h.value(z + shift)
            if abs(a - b) > 1e-8 * max(1.0, abs(a)):
                raise ValidationError("periodic", "Hamiltonian is not 2*pi-periodic in its angle "
                                      "coordinates")
    eq = sys.equivariance or validate_equivariance(sys, seed=seed)
    out["equivariance"] = eq.residual
    if not eq.constant_consistent:
        raise ValidationError("equivariance", "equivariance defect is not constant; no choice of "
                              "moment constants fixes it", eq.residual,
                              detail={"pair": _pair(eq.worst_pair)})
    if not eq.residual < EQUIVARIANCE_TOL:
        raise ValidationError("equivariance", f"residual {eq.residual:.3e} for pair "
                              f"{_pair(eq.worst_pair)}", eq.residual,
                              detail={"pair": _pair(eq.worst_pair)})
    inv, k, _ = invariance_residual(sys, seed=seed + 1)
    out["hamiltonian_invariance"] = inv
    if not inv < INVARIANCE_TOL:
        raise ValidationError("hamiltonian_invariance", f"h is not invariant under generator "
                              f"{k + 1} (residual {inv:.3e})", inv, detail={"generator": k + 1})
    return out


def _pair(p):
    return None if p is None else (p[0] + 1, p[1] + 1)


def make_system(names: Sequence[str], hamiltonian: str, algebra: LieAlgebraSpec,
                generators: Sequence[ActionGenerator], pairs=(), periodic=(), name: str = "",
                **kw) -> SystemDef:
    """Convenience constructor from coordinate names and Hamiltonian text."""
    space = PhaseSpace(tuple(names), tuple(pairs), tuple(periodic))
    h = ec.parse(hamiltonian, space.names)
    return SystemDef(space, algebra, list(generators), h, name=name, **kw)
