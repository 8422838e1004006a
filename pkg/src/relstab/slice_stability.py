"""Symplectic slice at a relative equilibrium and the definiteness verdict.

The slice ``ker dPhi_m / T_m(H.m)`` is realized concretely as the Euclidean
orthogonal complement of ``T_m(H.m)`` inside ``ker dPhi_m``.  The verdict is
computed twice: from definiteness of the Hessian of ``h - <Phi, xi>`` on the
slice, and from the equivalent statement that its restriction to
``ker dPhi_m`` is semidefinite with kernel exactly ``T_m(H.m)``.  The two must
agree.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from relstab.equilibria import RE_TOL, RelEquilibrium
from relstab.errors import ConsistencyError, NotRelativeEquilibriumError, SliceError, ValidationError
from relstab.linalg import Subspace, null_space, range_space
from relstab.phasespace import SystemDef

DEFINITENESS_TOL = 1e-8
CRITICAL_TOL = 1e-9
DESCENT_TOL = 1e-9
KERNEL_RANK_TOL = 1e-9
# eigenvalues below this fraction of the Hessian scale are roundoff, whatever rel_tol says
NOISE_TOL = 1e-12
CONTAINMENT_TOL = 1e-10
OMEGA_DET_TOL = 1e-10


class Verdict(str, enum.Enum):
    STABLE_CERTIFIED = "STABLE_CERTIFIED"
    INCONCLUSIVE_INDEFINITE = "INCONCLUSIVE_INDEFINITE"
    INCONCLUSIVE_DEGENERATE = "INCONCLUSIVE_DEGENERATE"


@dataclass
class SliceData:
    kernel: np.ndarray  # K, orthonormal basis of ker dPhi_m
    tangent_g: np.ndarray  # T_m(G.m)
    tangent_h: np.ndarray  # T_m(H.m)
    slice_basis: np.ndarray  # S
    omega_slice: np.ndarray  # omega(s_i, s_j)
    g_mu: Subspace
    jacobian_rank: int
    algebra_dim: int
    hessian: np.ndarray | None = None
    q_kernel: np.ndarray | None = None
    q_slice: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.slice_basis.shape[1]

    @property
    def regular(self) -> bool:
        return self.jacobian_rank == self.algebra_dim


def kernel_dphi(sys: SystemDef, m) -> np.ndarray:
    """Orthonormal basis of ``ker dPhi_m``."""
    if sys.algebra.dim == 0:
        return np.eye(sys.dim)
    return null_space(sys.moment_jacobian(m), sys.algebra.rank_tol)


def tangent_spaces(sys: SystemDef, m, mu) -> tuple:
    """``(T_G, T_H, g_mu)`` with ``T_H`` spanned by ``xi_M(m)`` for ``xi`` in ``g_mu``."""
    tol = sys.algebra.rank_tol
    b = sys.orbit_matrix(m)
    g_mu = sys.algebra.coadjoint_isotropy(mu)
    tg = range_space(b, tol) if b.shape[1] else np.zeros((sys.dim, 0))
    bh = b @ g_mu.basis
    th = range_space(bh, tol) if bh.shape[1] else np.zeros((sys.dim, 0))
    return tg, th, g_mu


def symplectic_slice(sys: SystemDef, m) -> SliceData:
    m = np.asarray(m, dtype=float)
    k = kernel_dphi(sys, m)
    mu = sys.moment_map(m)
    tg, th, g_mu = tangent_spaces(sys, m, mu)
    if th.shape[1]:
        leak = float(np.max(np.abs(th - k @ (k.T @ th))))
        if leak > CONTAINMENT_TOL:
            raise SliceError(f"T_m(H.m) is not contained in ker dPhi_m (defect {leak:.3e})")
        s = k @ null_space((k.T @ th).T, sys.algebra.rank_tol)
    else:
        s = k.copy()
    if s.shape[1] != k.shape[1] - th.shape[1]:
        raise SliceError("slice dimension is not dim ker dPhi - dim T_m(H.m)")
    if s.shape[1] % 2:
        raise SliceError(f"slice has odd dimension {s.shape[1]}; rank detection failed upstream")
    om = s.T @ sys.omega @ s
    if s.shape[1] and abs(np.linalg.det(om)) <= OMEGA_DET_TOL:
        raise SliceError("restricted symplectic form is degenerate on the slice")
    jr = 0
    if sys.algebra.dim:
        sv = np.linalg.svd(sys.moment_jacobian(m), compute_uv=False)
        jr = int(np.sum(sv > sys.algebra.rank_tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return SliceData(k, tg, th, s, om, g_mu, jr, sys.algebra.dim)


def restricted_hessian(sys: SystemDef, m, xi, data: SliceData | None = None) -> tuple:
    """``(Q_K, Q_S)``: Hessian of ``h - <Phi, xi>`` on ``ker dPhi_m`` and on the slice.

    Raises :class:`SliceError` when ``m`` is not critical for the augmented
    Hamiltonian or when the form fails to vanish on the orbit directions.
    """
    m = np.asarray(m, dtype=float)
    xi = np.asarray(xi, dtype=float)
    data = data or symplectic_slice(sys, m)
    grad = sys.augmented_gradient(xi, m)
    if np.linalg.norm(grad) > CRITICAL_TOL:
        raise SliceError(f"d(h - <Phi, xi>)(m) = {np.linalg.norm(grad):.3e} is not zero; "
                         "the Hessian is not well defined there")
    hess = sys.augmented_hessian(xi, m)
    k, th, s = data.kernel, data.tangent_h, data.slice_basis
    if th.shape[1]:
        descent = float(np.max(np.abs(th.T @ hess @ k)))
        if descent > DESCENT_TOL * max(1.0, float(np.max(np.abs(hess)))):
            raise SliceError(f"Hessian does not vanish on T_m(H.m) directions "
                             f"(defect {descent:.3e}); xi is inconsistent")
    q_k = k.T @ hess @ k
    q_s = s.T @ hess @ s
    data.hessian, data.q_kernel, data.q_slice = hess, _sym(q_k), _sym(q_s)
    return data.q_kernel, data.q_slice


def _sym(a):
    return 0.5 * (a + a.T)


@dataclass
class StabilityReport:
    verdict: Verdict
    definiteness: str
    eigenvalues: list
    signature: tuple  # (positive, negative, zero)
    kernel_match: bool
    kernel_verdict: Verdict
    regular_point: bool
    sign: int  # +1 positive definite, -1 negative definite, 0 otherwise
    threshold: float
    slice_dim: int
    invariance_residual: float
    notes: list = field(default_factory=list)


def hessian_scale(sys: SystemDef, m, xi) -> float:
    """Size of the two terms of the augmented Hessian before they cancel."""
    h_part = sys.augmented_hessian(np.zeros(len(xi)), m)
    return float(max(np.max(np.abs(h_part)), np.max(np.abs(h_part - sys.augmented_hessian(xi, m)))))


def _threshold(ev, rel_tol, scale):
    rho = float(np.max(np.abs(ev)))
    return max(rel_tol * rho, NOISE_TOL * (rho if scale is None else scale))


def classify_slice(q_s: np.ndarray, rel_tol: float = DEFINITENESS_TOL,
                   scale: float | None = None) -> tuple:
    """``(verdict, definiteness, eigenvalues, signature, sign, threshold)`` from ``Q_S``.

    ``scale`` is the size of the Hessian before cancellation (see
    :func:`hessian_scale`); eigenvalues under ``NOISE_TOL * scale`` count as zero
    even when ``Q_S`` is itself tiny.
    """
    ev = np.sort(np.linalg.eigvalsh(q_s))[::-1] if q_s.size else np.zeros(0)
    if ev.size == 0:
        return Verdict.STABLE_CERTIFIED, "empty", ev, (0, 0, 0), 1, 0.0
    rho = float(np.max(np.abs(ev)))
    thr = _threshold(ev, rel_tol, scale)
    pos, neg = int(np.sum(ev > thr)), int(np.sum(ev < -thr))
    zero = ev.size - pos - neg
    sig = (pos, neg, zero)
    if rho <= thr:
        return Verdict.INCONCLUSIVE_DEGENERATE, "zero", ev, (0, 0, ev.size), 0, thr
    if pos == ev.size:
        return Verdict.STABLE_CERTIFIED, "positive definite", ev, sig, 1, thr
    if neg == ev.size:
        return Verdict.STABLE_CERTIFIED, "negative definite", ev, sig, -1, thr
    if neg == 0:
        return Verdict.INCONCLUSIVE_DEGENERATE, "positive semidefinite", ev, sig, 0, thr
    if pos == 0:
        return Verdict.INCONCLUSIVE_DEGENERATE, "negative semidefinite", ev, sig, 0, thr
    return Verdict.INCONCLUSIVE_INDEFINITE, "indefinite", ev, sig, 0, thr


def classify_kernel(q_k: np.ndarray, k: np.ndarray, th: np.ndarray,
                    rel_tol: float = DEFINITENESS_TOL, scale: float | None = None) -> tuple:
    """``(verdict, kernel_match)`` from ``Q_K``: semidefinite with kernel exactly ``T_H``."""
    if q_k.size == 0:
        return Verdict.STABLE_CERTIFIED, True
    ev, vec = np.linalg.eigh(q_k)
    thr = _threshold(ev, rel_tol, scale)
    semidef = not (np.any(ev > thr) and np.any(ev < -thr))
    kern = k @ vec[:, np.abs(ev) <= thr]
    match = kern.shape[1] == th.shape[1]
    if match and kern.shape[1]:
        sv = np.linalg.svd(np.hstack([kern, th]), compute_uv=False)
        match = int(np.sum(sv > KERNEL_RANK_TOL * sv[0])) == th.shape[1]
    if not semidef:
        return Verdict.INCONCLUSIVE_INDEFINITE, match
    if match:
        return Verdict.STABLE_CERTIFIED, True
    return Verdict.INCONCLUSIVE_DEGENERATE, False


def stability_verdict(sys: SystemDef, re: RelEquilibrium, rel_tol: float = DEFINITENESS_TOL,
                      data: SliceData | None = None) -> StabilityReport:
    """Definiteness verdict at a relative equilibrium, cross-checked two ways.

    Raises
    ------
    NotRelativeEquilibriumError
        If ``re.residual`` exceeds the relative-equilibrium tolerance.
    ValidationError
        If the inner product is not invariant under the isotropy algebra of ``mu``.
    ConsistencyError
        If the slice test and the kernel-match test disagree.
    """
    if not re.residual < RE_TOL:
        raise NotRelativeEquilibriumError(re.residual, RE_TOL)
    data = data or symplectic_slice(sys, re.point)
    inv = sys.algebra.check_invariance(data.g_mu)
    if not inv.accepted:
        raise ValidationError("inner_product", "inner product is not Ad(H)-invariant "
                              f"(residual {inv.residual:.3e}, triple {inv.triple})", inv.residual,
                              detail={"triple": inv.triple})
    q_k, q_s = restricted_hessian(sys, re.point, re.xi, data)
    scale = hessian_scale(sys, re.point, re.xi)
    verdict, kind, ev, sig, sign, thr = classify_slice(q_s, rel_tol, scale)
    kverdict, match = classify_kernel(q_k, data.kernel, data.tangent_h, rel_tol, scale)
    if kverdict != verdict:
        raise ConsistencyError(f"slice test says {verdict.value}, kernel test says {kverdict.value}")
    notes = []
    if not re.xi_in_g_mu:
        notes.append(f"velocity is not in the coadjoint isotropy algebra "
                     f"(defect {re.coadjoint_defect:.3e})")
    if not re.xi_perp_g_m:
        notes.append("velocity is not orthogonal to the isotropy algebra of the point")
    if verdict is Verdict.STABLE_CERTIFIED:
        notes.append("Hessian of h - <Phi, xi> is definite on the symplectic slice: "
                     "the relative equilibrium is H-stable, H the isotropy group of mu"
                     + ("" if sys.proper_action else " (provided H acts properly; not asserted "
                        "by the system file)"))
        if data.regular:
            notes.append("regular point of the moment map: the classical regular-value "
                         "energy-momentum test applies as well")
        if sign < 0:
            notes.append("the form is negative definite; stability follows by applying the "
                         "criterion to -h")
    elif verdict is Verdict.INCONCLUSIVE_DEGENERATE:
        notes.append("semidefinite with kernel larger than T_m(H.m): higher-order terms decide")
    else:
        notes.append("indefinite on the slice: the criterion does not apply")
    return StabilityReport(verdict, kind, [float(x) for x in ev], sig, bool(match), kverdict,
                           data.regular, sign, thr, data.dim, inv.residual, notes)
