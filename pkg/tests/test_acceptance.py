"""End-to-end acceptance checks, one group per criterion.

Each check records ``(criterion, name, ok, detail)``; the terminal summary
prints one PASS/FAIL line per criterion (all of its checks must pass).
"""

from collections import defaultdict

import numpy as np
import pytest

from relstab import exprcalc as ec
from relstab import dynamics as dyn
from relstab import slice_stability as ss
from relstab.equilibria import characterize
from relstab.liealg import abelian
from relstab.phasespace import ActionGenerator, PhaseSpace, SystemDef, validate_equivariance

import conftest
from oracles import (action_matrix, ex16_growth_rate, fd_gradient, fd_hessian,
                     random_symplectic)

_RESULTS = defaultdict(list)

TITLES = {
    1: "EX16 reproduction",
    2: "EX16 instability",
    3: "SO(3) oscillator certification",
    4: "criterion equivalence",
    5: "equivariance suite",
    6: "integrator suite",
    7: "derivative oracle",
    8: "Hessian restriction identity",
}


def check(criterion: int, name: str, ok: bool, detail: str = "") -> None:
    _RESULTS[criterion].append((name, bool(ok), detail))
    line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {name}: {detail}"
    print(line)
    _summarize()
    assert ok, line


def _summarize():
    conftest.ACCEPTANCE_LINES[:] = []
    for c in sorted(_RESULTS):
        items = _RESULTS[c]
        ok = all(i[1] for i in items)
        failed = [i[0] for i in items if not i[1]]
        tail = f" (failed: {', '.join(failed)})" if failed else ""
        conftest.ACCEPTANCE_LINES.append(
            f"criterion {c} {'PASS' if ok else 'FAIL'}: {TITLES[c]}, "
            f"{len(items) - len(failed)}/{len(items)} checks{tail}")


EX16_DELTA = 1e-3
SO3_M = np.array([1.0, 0, 0, 0, 1.0, 0])


# -- 1 -------------------------------------------------------------------------


@pytest.mark.parametrize("theta", [0.0, 0.7, 2.5, -3.0])
def test_c1_ex16_reproduction(ex16, theta):
    m = np.array([0, 0, 0, 0, theta, 0.0])
    re = characterize(ex16, m)
    rep = ss.stability_verdict(ex16, re)
    ev = np.sort(rep.eigenvalues)
    ok = (re.residual < 1e-12 and np.all(re.xi == 0.0) and np.all(re.mu == 0.0)
          and rep.slice_dim == 4 and np.max(np.abs(ev - [-1, -1, 1, 1])) < 1e-9
          and rep.verdict is ss.Verdict.INCONCLUSIVE_INDEFINITE)
    check(1, f"theta={theta}", ok, f"residual {re.residual:.1e}, slice dim {rep.slice_dim}, "
          f"eigenvalues {np.round(ev, 12).tolist()}, {rep.verdict.value}")


# -- 2 -------------------------------------------------------------------------


def test_c2_ex16_escape_with_growth_rate(ex16):
    re = characterize(ex16, np.zeros(6))
    offset = np.zeros(6)
    offset[5] = 1e-3
    # horizon long enough for escape at rate 2e-3; dt = 0.05 keeps the run short
    res = dyn.stability_probe(ex16, re, [EX16_DELTA], horizon=5000.0, samples_per_radius=16,
                              dt=0.05, seed=0, perturb=[0, 1, 2, 3, 4], offset=offset)
    expected = ex16_growth_rate(1e-3)
    rate = res.growth_rate
    ok = (res.verdict == "ESCAPE_OBSERVED" and rate is not None
          and abs(rate - expected) <= 0.1 * expected)
    check(2, "p_theta = 1e-3 escapes", ok,
          f"{res.verdict}, {res.escaped_count}/16 escaped, rate {rate} (expected {expected:.3e}, "
          f"R^2 {res.growth_rate_r2})")


def test_c2_ex16_no_escape_at_zero_momentum(ex16):
    re = characterize(ex16, np.zeros(6))
    res = dyn.stability_probe(ex16, re, [EX16_DELTA], horizon=100.0, samples_per_radius=8,
                              dt=1e-3, seed=0, perturb=[0, 1, 2, 3, 4])
    md = res.outcomes[0].max_distance
    ok = res.verdict == "NO_ESCAPE_OBSERVED" and md < EX16_DELTA + 1e-6
    check(2, "p_theta = 0 stays", ok, f"{res.verdict}, max distance {md:.9e}")


# -- 3 -------------------------------------------------------------------------


def test_c3_so3_certificate(so3_osc):
    re = characterize(so3_osc, SO3_M)
    data = ss.symplectic_slice(so3_osc, SO3_M)
    rep = ss.stability_verdict(so3_osc, re, data=data)
    # kernel of Q_K equals T_H: rank test at 1e-9 on [kernel vectors | T_H]
    ev, vec = np.linalg.eigh(data.q_kernel)
    kern = data.kernel @ vec[:, np.abs(ev) <= 1e-9 * np.max(np.abs(ev))]
    stacked = np.hstack([kern, data.tangent_h])
    sv = np.linalg.svd(stacked, compute_uv=False)
    same = kern.shape[1] == data.tangent_h.shape[1] == int(np.sum(sv > 1e-9 * sv[0]))
    ok = (np.allclose(re.xi, [0, 0, 1], atol=1e-12) and rep.slice_dim == 2
          and rep.definiteness == "positive definite" and same and rep.kernel_match
          and rep.verdict is ss.Verdict.STABLE_CERTIFIED)
    check(3, "slice certificate", ok, f"xi {np.round(re.xi, 12).tolist()}, slice dim "
          f"{rep.slice_dim}, Q_S eigenvalues {np.round(rep.eigenvalues, 12).tolist()}, "
          f"kernel = T_H: {same}, {rep.verdict.value}")


def test_c3_so3_probe(so3_osc):
    re = characterize(so3_osc, SO3_M)
    res = dyn.stability_probe(so3_osc, re, [1e-3, 1e-2], horizon=100.0, samples_per_radius=8,
                              dt=1e-3, seed=0)
    md = [o.max_distance for o in res.outcomes]
    check(3, "probe", res.verdict == "NO_ESCAPE_OBSERVED", f"{res.verdict}, max distances {md}")


# -- 4 -------------------------------------------------------------------------


def _random_quadratic_system(rng):
    """Quadratic ``h`` in normal-mode coordinates ``w = P^-1 z`` with abelian symmetry.

    ``h = sum_i omega_i I_i(w)`` and each generator has moment ``sum_i D_ai I_i(w)``,
    so all of them Poisson-commute.  Some frequencies are zero or negative.
    """
    n = int(rng.integers(2, 4))
    d = int(rng.integers(1, n + 1))
    p, om = random_symplectic(n, rng)
    pinv = np.linalg.inv(p)
    freqs = rng.choice([-2.0, -1.0, 0.0, 0.5, 1.0, 1.5, 3.0], size=n)
    weights = rng.integers(-1, 3, size=(d, n)).astype(float)
    weights[:, 0] = np.where(weights[:, 0] == 0, 1.0, weights[:, 0])
    gens = []
    for a in range(d):
        s = pinv.T @ action_matrix(weights[a], n) @ pinv
        gens.append(ActionGenerator(om @ s, np.zeros(2 * n)))
    hmat = pinv.T @ action_matrix(freqs, n) @ pinv
    q = rng.standard_normal((d, d))
    q = q @ q.T + d * np.eye(d)
    names = [f"q{i}" for i in range(n)] + [f"p{i}" for i in range(n)]
    sys = SystemDef(PhaseSpace(tuple(names)), abelian(d, q), gens, ec.quadratic_form(hmat, 0.5))
    excited = p @ np.eye(2 * n)[0]  # unit amplitude in mode 0
    return sys, [np.zeros(2 * n), excited]


def _both_verdicts(sys, m):
    re = characterize(sys, m)
    assert re.residual < 1e-9, re.residual
    data = ss.symplectic_slice(sys, m)
    q_k, q_s = ss.restricted_hessian(sys, m, re.xi, data)
    scale = ss.hessian_scale(sys, m, re.xi)
    return (ss.classify_slice(q_s, scale=scale)[0],
            ss.classify_kernel(q_k, data.kernel, data.tangent_h, scale=scale)[0])


def test_c4_criterion_equivalence(ex16, so3_osc, trivial):
    cases = [(ex16, np.array([0, 0, 0, 0, 0.7, 0.0])), (so3_osc, SO3_M),
             (so3_osc, np.zeros(6)), (trivial, np.zeros(4))]
    rng = np.random.default_rng(2024)
    for _ in range(50):
        sys, points = _random_quadratic_system(rng)
        cases.extend((sys, m) for m in points)
    disagreements = 0
    tally = defaultdict(int)
    for sys, m in cases:
        a, b = _both_verdicts(sys, m)
        tally[a.value] += 1
        disagreements += a is not b
    check(4, f"{len(cases)} equilibria", disagreements == 0,
          f"{disagreements} disagreements; verdicts {dict(sorted(tally.items()))}")


# -- 5 -------------------------------------------------------------------------


def _bracket_residuals(sys, n_points=200, seed=5):
    """Independent numeric route: ``{f, g} = grad f . Omega grad g`` from compiled gradients."""
    rng = np.random.default_rng(seed)
    pts = sys.space.random_points(n_points, rng)
    phis = [ec.CompiledFunction(m, sys.dim) for m in sys.moment]
    c = sys.algebra.structure_constants
    eq, noether = 0.0, 0.0
    for z in pts:
        grads = [f.gradient(z) for f in phis]
        vals = np.array([f.value(z) for f in phis])
        gh = sys.h.gradient(z)
        for i in range(len(phis)):
            noether = max(noether, abs(gh @ sys.omega @ grads[i]))
            for j in range(len(phis)):
                lhs = grads[i] @ sys.omega @ grads[j]
                eq = max(eq, abs(lhs - c[i, j] @ vals))
    return eq, noether


@pytest.mark.parametrize("which", ["ex16", "so3_osc"])
def test_c5_equivariance(request, which):
    sys = request.getfixturevalue(which)
    eq, noether = _bracket_residuals(sys)
    sym = validate_equivariance(sys, 200).residual
    ok = eq < 1e-10 and sym < 1e-10 and noether < 1e-8
    check(5, which, ok, f"equivariance {eq:.2e} (symbolic {sym:.2e}), Noether {noether:.2e}")


# -- 6 -------------------------------------------------------------------------

EX16_Z0 = [0.3, -0.2, 0.1, 0.4, 0.5, 0.05]


@pytest.fixture(scope="module")
def ex16_runs(ex16):
    return {dt: dyn.integrate(ex16, EX16_Z0, 100.0, dt, stride=10) for dt in (2e-3, 1e-3)}


def test_c6_moment_conservation(so3_osc, ex16_runs):
    tr = dyn.integrate(so3_osc, [0.3, -0.7, 0.2, 0.5, 0.1, -0.4], 100.0, 1e-3, stride=10)
    so3_drift = float(np.max(tr.moment_drift))
    ex_drift = float(ex16_runs[1e-3].moment_drift[0])
    ok = so3_drift < 1e-10 and ex_drift < 1e-10
    check(6, "moment conservation", ok, f"SO(3) q x p drift {so3_drift:.2e}, "
          f"EX16 p_theta drift {ex_drift:.2e}")


def test_c6_energy_drift(ex16_runs):
    drift = ex16_runs[1e-3].energy_drift
    check(6, "EX16 energy drift", drift < 1e-6, f"{drift:.3e} at dt = 1e-3")


def test_c6_second_order_ratio(ex16_runs):
    coarse, fine = ex16_runs[2e-3].energy_drift, ex16_runs[1e-3].energy_drift
    ratio = coarse / fine if fine > 0 else float("inf")
    check(6, "EX16 drift ratio under dt halving", 3.5 <= ratio <= 4.5,
          f"drift {coarse:.3e} -> {fine:.3e}, ratio {ratio:.3f} (required [3.5, 4.5])")


# -- 7 -------------------------------------------------------------------------

VARS = ["q1", "q2", "q3", "p1", "p2", "p3"]


def _random_text(rng, depth):
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.7:
            return VARS[int(rng.integers(len(VARS)))]
        return f"{rng.uniform(0.2, 2.0):.3f}"
    kind = rng.choice(["+", "-", "*", "*", "^", "f"])
    a = _random_text(rng, depth - 1)
    if kind in ("+", "-", "*"):
        return f"({a} {kind} {_random_text(rng, depth - 1)})"
    if kind == "^":
        return f"({a})^{int(rng.integers(2, 4))}"
    name = rng.choice(["sin", "cos", "exp"])
    return f"exp(0.5*sin({a}))" if name == "exp" else f"{name}({a})"


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(a))), 1.0))


def test_c7_derivative_oracle():
    rng = np.random.default_rng(7)
    worst_g = worst_h = 0.0
    for _ in range(1000):
        e = ec.parse(_random_text(rng, 4), VARS)
        f = ec.CompiledFunction(e, len(VARS))
        z = rng.uniform(-1, 1, len(VARS))
        worst_g = max(worst_g, _rel(f.gradient(z), fd_gradient(f.value, z)))
        worst_h = max(worst_h, _rel(f.hessian(z), fd_hessian(f.value, z)))
    ok = worst_g < 1e-6 and worst_h < 1e-6
    check(7, "1000 random expressions", ok,
          f"worst relative error gradient {worst_g:.2e}, Hessian {worst_h:.2e}")


# -- 8 -------------------------------------------------------------------------


def test_c8_hessian_restriction():
    rng = np.random.default_rng(8)
    worst = 0.0
    for case in range(100):
        n = int(rng.integers(3, 9))
        k = int(rng.integers(1, n))
        h = rng.standard_normal((n, n))
        h = h + h.T
        x0 = rng.standard_normal(n)
        s = rng.standard_normal((n, k))
        # f(x) = 1/2 (x - x0)^T H (x - x0) + c has a critical point at x0
        shift = [ec.add(ec.Var(i), ec.Const(-x0[i])) for i in range(n)]
        f = ec.add(ec.substitute(ec.quadratic_form(h, 0.5), shift), ec.Const(rng.normal()))
        # psi(y) = x0 + S y (+ quadratic bending on odd cases), a submanifold through x0
        psi = []
        for i in range(n):
            comp = ec.linear_form(s[i], x0[i])
            if case % 2:
                b = rng.standard_normal((k, k))
                comp = ec.add(comp, ec.quadratic_form(0.5 * (b + b.T), 0.3))
            psi.append(comp)
        pulled = ec.substitute(f, psi)
        got = ec.hessian(pulled, np.zeros(k))
        worst = max(worst, float(np.max(np.abs(got - s.T @ h @ s))))
    check(8, "100 random quadratics", worst < 1e-10, f"max |S^T H S - d^2(f o psi)| = {worst:.2e}")
