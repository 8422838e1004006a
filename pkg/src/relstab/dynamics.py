"""Implicit-midpoint integration, conservation monitors and the escape probe.

The probe is empirical evidence for (or against) H-stability: perturbed
initial conditions are integrated and their distance to the sampled orbit
``H.m`` is tracked.  An escape refutes stability; containment only supports
it, since finitely many samples over a finite horizon cannot exhaust the
neighbourhoods in the definition.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.optimize

from relstab.equilibria import RelEquilibrium, affine_exponential
from relstab.errors import IntegrationError
from relstab.phasespace import SystemDef

log = logging.getLogger(__name__)

NEWTON_TOL = 1e-13
NEWTON_MAX_ITER = 20
MAX_HALVINGS = 4
ORBIT_BUDGET = 10_000
THREADS_ENV = "RELSTAB_THREADS"


class MidpointStepper:
    """Implicit midpoint ``z' = z + dt X_h((z + z')/2)`` solved by Newton.

    When the Hamiltonian is quadratic the Newton solve is exact in one step, so
    the map is precomputed as ``z' = C z + d`` (the Cayley transform of the
    linear field) unless ``exact_linear=False``.
    """

    def __init__(self, sys: SystemDef, dt: float, tol: float = NEWTON_TOL,
                 max_iter: int = NEWTON_MAX_ITER, exact_linear: bool = True):
        if dt < 0:
            raise ValueError("time step must be non-negative")
        self.sys = sys
        self.dt = float(dt)
        self.tol = tol
        self.max_iter = max_iter
        self.omega = sys.omega
        self.eye = np.eye(sys.dim)
        self.max_newton_iterations = 0
        self.linear = None
        if exact_linear and sys.h.hessian_is_constant:
            self.linear = {}

    def _cayley(self, dt: float):
        if dt not in self.linear:
            lin = self.omega @ self.sys.h.hessian(np.zeros(self.sys.dim))
            c0 = self.omega @ self.sys.h.gradient(np.zeros(self.sys.dim))
            lhs = self.eye - 0.5 * dt * lin
            cmat = np.linalg.solve(lhs, self.eye + 0.5 * dt * lin)
            d = np.linalg.solve(lhs, dt * c0)
            self.linear[dt] = (cmat, d)
        return self.linear[dt]

    # -- single point ----------------------------------------------------

    def _newton(self, z: np.ndarray, dt: float) -> np.ndarray | None:
        h, om = self.sys.h, self.omega
        z1 = z + dt * (om @ h.gradient(z))
        for it in range(1, self.max_iter + 1):
            mid = 0.5 * (z + z1)
            f = z1 - z - dt * (om @ h.gradient(mid))
            jac = self.eye - 0.5 * dt * (om @ h.hessian(mid))
            delta = np.linalg.solve(jac, -f)
            z1 = z1 + delta
            if not np.all(np.isfinite(z1)):
                return None
            if np.max(np.abs(delta)) <= self.tol * max(1.0, float(np.max(np.abs(z1)))):
                self.max_newton_iterations = max(self.max_newton_iterations, it)
                return z1
        return None

    def step(self, z, dt: float | None = None) -> np.ndarray:
        dt = self.dt if dt is None else float(dt)
        z = np.asarray(z, dtype=float)
        if dt == 0.0:
            return z.copy()
        if self.linear is not None:
            cmat, d = self._cayley(dt)
            return cmat @ z + d
        for k in range(MAX_HALVINGS + 1):
            sub = dt / 2**k
            w = z
            for _ in range(2**k):
                w = self._newton(w, sub)
                if w is None:
                    break
            if w is not None:
                if k:
                    log.debug("midpoint step needed %d halvings", k)
                return w
        raise IntegrationError(f"Newton failed for dt={dt} after {MAX_HALVINGS} halvings")

    # -- batch of points (columns) ---------------------------------------

    def _newton_batch(self, z: np.ndarray, dt: float) -> np.ndarray | None:
        h, om = self.sys.h, self.omega
        z1 = z + dt * (om @ h.gradient_batch(z))
        for it in range(1, self.max_iter + 1):
            mid = 0.5 * (z + z1)
            f = z1 - z - dt * (om @ h.gradient_batch(mid))
            jac = self.eye - 0.5 * dt * np.einsum("ij,bjk->bik", om, h.hessian_batch(mid))
            delta = np.linalg.solve(jac, -f.T[..., None])[..., 0].T
            z1 = z1 + delta
            if not np.all(np.isfinite(z1)):
                return None
            scale = np.maximum(1.0, np.max(np.abs(z1), axis=0))
            if np.all(np.max(np.abs(delta), axis=0) <= self.tol * scale):
                self.max_newton_iterations = max(self.max_newton_iterations, it)
                return z1
        return None

    def step_batch(self, z: np.ndarray, dt: float | None = None) -> np.ndarray:
        dt = self.dt if dt is None else float(dt)
        if dt == 0.0 or z.shape[1] == 0:
            return z.copy()
        if self.linear is not None:
            cmat, d = self._cayley(dt)
            return cmat @ z + d[:, None]
        for k in range(MAX_HALVINGS + 1):
            sub = dt / 2**k
            w = z
            for _ in range(2**k):
                w = self._newton_batch(w, sub)
                if w is None:
                    break
            if w is not None:
                return w
        raise IntegrationError(f"Newton failed for dt={dt} after {MAX_HALVINGS} halvings")


def step_implicit_midpoint(sys: SystemDef, z, dt: float, exact_linear: bool = True) -> np.ndarray:
    return MidpointStepper(sys, dt, exact_linear=exact_linear).step(z)


@dataclass
class Trajectory:
    dt: float
    horizon: float
    stride: int
    times: np.ndarray
    states: np.ndarray  # (samples, 2n)
    energy: np.ndarray
    moment: np.ndarray  # (samples, d)
    moment_norm_sq: np.ndarray
    newton_iterations: int = 0
    energy_drift_bound: float | None = None

    @property
    def energy_drift(self) -> float:
        return float(np.max(np.abs(self.energy - self.energy[0])))

    @property
    def moment_drift(self) -> np.ndarray:
        if self.moment.shape[1] == 0:
            return np.zeros(0)
        return np.max(np.abs(self.moment - self.moment[0]), axis=0)

    @property
    def within_bound(self) -> bool:
        return self.energy_drift_bound is None or self.energy_drift <= self.energy_drift_bound


def _step_count(horizon: float, dt: float) -> tuple:
    if horizon <= 0 or dt <= 0:
        raise ValueError("horizon and time step must be positive")
    n = max(1, int(round(horizon / dt)))
    return n, horizon / n


def integrate(sys: SystemDef, z0, horizon: float, dt: float, stride: int = 1,
              energy_drift_bound: float | None = None, exact_linear: bool = True) -> Trajectory:
    """Integrate from ``z0`` to ``horizon``; ``dt`` is adjusted so a whole number of steps fits."""
    nsteps, dt = _step_count(horizon, dt)
    stepper = MidpointStepper(sys, dt, exact_linear=exact_linear)
    z = np.array(z0, dtype=float)
    states, times = [z.copy()], [0.0]
    for k in range(1, nsteps + 1):
        z = stepper.step(z)
        if k % stride == 0 or k == nsteps:
            states.append(z.copy())
            times.append(k * dt)
    states = np.array(states)
    energy = sys.h.value_batch(states.T)
    moment = sys.moment_map_batch(states.T).T
    qinv = np.linalg.inv(sys.algebra.inner_product) if sys.algebra.dim else np.zeros((0, 0))
    norm_sq = np.einsum("ki,ij,kj->k", moment, qinv, moment)
    return Trajectory(dt, horizon, stride, np.array(times), states, energy, moment, norm_sq,
                      stepper.max_newton_iterations, energy_drift_bound)


def projected_moment_norm_sq(sys: SystemDef, traj: Trajectory, sub) -> np.ndarray:
    """``|pi_h Phi|^2`` per sample for a ``Q``-orthonormal subalgebra basis ``sub``."""
    if sub.rank == 0:
        return np.zeros(len(traj.times))
    return np.sum((traj.moment @ sub.basis) ** 2, axis=1)


def write_trajectory_csv(sys: SystemDef, traj: Trajectory, path: str | Path) -> Path:
    path = Path(path)
    header = ["t", *sys.space.names, "h", *[f"phi_{k + 1}" for k in range(sys.algebra.dim)],
              "phi_norm_sq"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for k in range(len(traj.times)):
            row = [traj.times[k], *traj.states[k], traj.energy[k], *traj.moment[k],
                   traj.moment_norm_sq[k]]
            w.writerow([f"{float(x):.17g}" for x in row])
    return path


# -- distance to the H-orbit ---------------------------------------------------


class OrbitSampler:
    """Sampled orbit ``H.m`` with ``H`` generated by a subalgebra basis.

    Group elements are products ``exp(t_1 eta_1) ... exp(t_k eta_k)`` on a
    grid ``t_a in [-pi, pi)``, at most ``budget`` elements, identity included.
    For ``k > 3`` only the one-parameter subgroups are sampled (``fallback``).
    Distances at single points are refined by local minimization over ``t``.
    """

    def __init__(self, sys: SystemDef, m, basis: np.ndarray, budget: int = ORBIT_BUDGET):
        self.sys = sys
        self.m = np.asarray(m, dtype=float)
        self.basis = np.asarray(basis, dtype=float).reshape(sys.algebra.dim, -1)
        k = self.basis.shape[1]
        self.k = k
        self.fallback = k > 3
        mhat = np.append(self.m, 1.0)
        if k == 0:
            self.params = np.zeros((1, 0))
            self.points = self.m[None, :]
            self.resolution = 0.0
            return
        per_dim = budget // k if self.fallback else int(math.floor(budget ** (1.0 / k) + 1e-9))
        per_dim = max(2, per_dim - per_dim % 2)  # even, so t = 0 is a grid point
        grid = np.linspace(-math.pi, math.pi, per_dim, endpoint=False)
        grid[per_dim // 2] = 0.0
        self.resolution = 2 * math.pi / per_dim
        mats = [self._grid_exp(a, grid) for a in range(k)]
        if self.fallback:
            pts, params = [], []
            for a in range(k):
                pts.append(mats[a] @ mhat)
                p = np.zeros((len(grid), k))
                p[:, a] = grid
                params.append(p)
            self.points = np.vstack(pts)[:, :-1]
            self.params = np.vstack(params)
        else:
            cur = mats[k - 1] @ mhat  # (N, 2n+1)
            for a in range(k - 2, -1, -1):
                cur = np.einsum("gij,nj->gni", mats[a], cur).reshape(-1, mhat.size)
            self.points = cur[:, :-1]
            self.params = np.array(list(itertools.product(grid, repeat=k)))

    def _exp(self, a: int, t: float) -> np.ndarray:
        return affine_exponential(self.sys, self.basis[:, a], t)

    def _grid_exp(self, a: int, grid: np.ndarray) -> np.ndarray:
        """``exp(t eta_a)`` on a uniform grid by repeated multiplication from both ends of 0."""
        out = np.empty((grid.size, self.sys.dim + 1, self.sys.dim + 1))
        mid = grid.size // 2
        out[mid] = np.eye(self.sys.dim + 1)
        fwd = self._exp(a, grid[1] - grid[0])
        back = self._exp(a, grid[0] - grid[1])
        for j in range(mid + 1, grid.size):
            out[j] = fwd @ out[j - 1]
        for j in range(mid - 1, -1, -1):
            out[j] = back @ out[j + 1]
        return out

    def act(self, params) -> np.ndarray:
        out = np.append(self.m, 1.0)
        for a in range(self.k - 1, -1, -1):
            out = self._exp(a, params[a]) @ out
        return out[:-1]

    def grid_distances(self, z: np.ndarray, chunk: int = 256) -> tuple:
        """Nearest sampled orbit point for each row of ``z``: ``(distances, indices)``."""
        z = np.atleast_2d(z)
        per = self.sys.space.periodic_mask
        dist = np.empty(len(z))
        idx = np.empty(len(z), dtype=int)
        for s in range(0, len(z), chunk):
            diff = z[s : s + chunk, None, :] - self.points[None, :, :]
            if per.any():
                diff[..., per] = (diff[..., per] + math.pi) % (2 * math.pi) - math.pi
            d2 = np.einsum("bgi,bgi->bg", diff, diff)
            j = np.argmin(d2, axis=1)
            idx[s : s + chunk] = j
            dist[s : s + chunk] = np.sqrt(d2[np.arange(len(j)), j])
        return dist, idx

    def distance(self, z, start_index: int | None = None) -> float:
        z = np.asarray(z, dtype=float)
        if start_index is None:
            d0, j = self.grid_distances(z[None, :])
            d0, start_index = float(d0[0]), int(j[0])
        else:
            d0 = self.sys.space.distance(z, self.points[start_index])
        if self.k == 0 or d0 == 0.0:
            return d0

        def objective(t):
            diff = self.sys.space.wrap_difference(z - self.act(t))
            return float(diff @ diff)

        t0 = self.params[start_index]
        if self.k == 1:
            res = scipy.optimize.minimize_scalar(
                lambda t: objective([t]), bounds=(t0[0] - self.resolution, t0[0] + self.resolution),
                method="bounded", options={"xatol": 1e-13})
        else:
            res = scipy.optimize.minimize(objective, t0, method="BFGS",
                                          options={"gtol": 1e-14, "xrtol": 1e-14})
        return float(math.sqrt(min(d0 * d0, res.fun)))


def orbit_distance(sys: SystemDef, z, m, basis=None) -> float:
    """Distance from ``z`` to ``H.m``; ``basis`` defaults to ``g_mu`` at ``m``."""
    if basis is None:
        basis = sys.algebra.coadjoint_isotropy(sys.moment_map(m)).basis
    return OrbitSampler(sys, m, basis).distance(z)


# -- probe -----------------------------------------------------------------------


@dataclass
class RadiusOutcome:
    radius: float
    max_distance: float
    escaped: list
    escape_time: list
    initial_distance: list


@dataclass
class ProbeResult:
    radii: list
    outcomes: list
    escape_radius: float
    horizon: float
    dt: float
    samples_per_radius: int
    seed: int
    verdict: str
    growth_rate: float | None = None
    growth_rate_r2: float | None = None
    growth_samples: int = 0
    orbit_resolution: float = 0.0
    orbit_fallback: bool = False
    notes: list = field(default_factory=list)

    @property
    def escaped_count(self) -> int:
        return sum(sum(o.escaped) for o in self.outcomes)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _run_batch(stepper: MidpointStepper, sampler: OrbitSampler, z0: np.ndarray, nsteps: int,
               record_every: int, escape_radius: float, dt: float) -> dict:
    """Integrate columns of ``z0``; stop each sample once it leaves ``escape_radius``."""
    b = z0.shape[1]
    z = z0.copy()
    active = np.arange(b)
    times = [[0.0] for _ in range(b)]
    d0, _ = sampler.grid_distances(z.T)
    dists = [[float(x)] for x in d0]
    states = [[z[:, i].copy()] for i in range(b)]
    esc_time = [None] * b
    for k in range(1, nsteps + 1):
        if active.size == 0:
            break
        z = stepper.step_batch(z)
        if k % record_every and k != nsteps:
            continue
        d, _ = sampler.grid_distances(z.T)
        keep = []
        for col, i in enumerate(active):
            times[i].append(k * dt)
            dists[i].append(float(d[col]))
            states[i].append(z[:, col].copy())
            if d[col] > escape_radius:
                esc_time[i] = k * dt
            else:
                keep.append(col)
        if len(keep) < active.size:
            active = active[keep]
            z = z[:, keep]
    return {"times": times, "dists": dists, "states": states, "escape_time": esc_time}


def _fit_growth(times, dists, t_esc) -> tuple:
    t = np.asarray(times)
    d = np.asarray(dists)
    sel = (t >= 0.5 * t_esc) & (d > 0)
    if sel.sum() < 3:
        return None
    coef = np.polyfit(t[sel], np.log(d[sel]), 1)
    pred = np.polyval(coef, t[sel])
    y = np.log(d[sel])
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return float(coef[0]), r2


def stability_probe(sys: SystemDef, re: RelEquilibrium, radii, horizon: float = 100.0,
                    samples_per_radius: int = 8, dt: float = 1e-3, seed: int = 0,
                    escape_factor: float = 100.0, perturb=None, offset=None,
                    record_every: int | None = None, csv_dir: str | Path | None = None,
                    threads: int | None = None) -> ProbeResult:
    """Integrate perturbations of ``re.point`` and watch their distance to ``H.m``.

    Parameters
    ----------
    radii
        Perturbation sizes; each sample is ``m + offset + r u`` with ``u``
        uniform on the unit sphere of the coordinates listed in ``perturb``
        (indices, default all).
    escape_factor
        A sample escapes once its orbit distance exceeds
        ``escape_factor * max(radii)``.
    record_every
        Steps between distance checks (default: about 2000 checks per horizon).
    """
    radii = [float(r) for r in radii]
    nsteps, dt = _step_count(horizon, dt)
    record_every = record_every or max(1, nsteps // 2000)
    rng = np.random.default_rng(seed)
    mask = np.zeros(sys.dim, dtype=bool)
    mask[list(range(sys.dim)) if perturb is None else list(perturb)] = True
    shift = np.zeros(sys.dim) if offset is None else np.asarray(offset, dtype=float)
    g_mu = sys.algebra.coadjoint_isotropy(re.mu)
    sampler = OrbitSampler(sys, re.point, g_mu.basis)
    esc_radius = escape_factor * max(radii) if radii else 0.0
    result = ProbeResult(radii, [], esc_radius, horizon, dt, samples_per_radius, seed,
                         "NO_ESCAPE_OBSERVED", orbit_resolution=sampler.resolution,
                         orbit_fallback=sampler.fallback)
    if sampler.fallback:
        result.notes.append("orbit sampled along one-parameter subgroups only (dim h > 3)")
    nthreads = threads or _threads()
    fits = []
    csv_index = 0
    for r in radii:
        u = rng.standard_normal((samples_per_radius, sys.dim)) * mask
        norms = np.linalg.norm(u, axis=1, keepdims=True)
        u = u / np.where(norms > 0, norms, 1.0)
        z0 = (re.point + shift + r * u).T
        chunks = np.array_split(np.arange(samples_per_radius), min(nthreads, samples_per_radius))
        chunks = [c for c in chunks if c.size]

        def work(cols):
            stepper = MidpointStepper(sys, dt)
            return _run_batch(stepper, sampler, z0[:, cols], nsteps, record_every, esc_radius, dt)

        if len(chunks) > 1:
            with ThreadPoolExecutor(len(chunks)) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(c) for c in chunks]
        run = {key: [x for p in parts for x in p[key]] for key in parts[0]} if parts else \
            {"times": [], "dists": [], "states": [], "escape_time": []}
        escaped = [t is not None for t in run["escape_time"]]
        max_d = _refined_max(sampler, run)
        result.outcomes.append(RadiusOutcome(r, max_d, escaped, run["escape_time"],
                                             [d[0] for d in run["dists"]]))
        for i, t_esc in enumerate(run["escape_time"]):
            if t_esc is not None:
                fit = _fit_growth(run["times"][i], run["dists"][i], t_esc)
                if fit is not None:
                    fits.append(fit)
        if csv_dir is not None:
            out = Path(csv_dir)
            out.mkdir(parents=True, exist_ok=True)
            for i in range(len(run["times"])):
                states = np.array(run["states"][i])
                moment = sys.moment_map_batch(states.T).T
                qinv = np.linalg.inv(sys.algebra.inner_product) if sys.algebra.dim else \
                    np.zeros((0, 0))
                traj = Trajectory(dt, horizon, record_every, np.array(run["times"][i]), states,
                                  sys.h.value_batch(states.T), moment,
                                  np.einsum("ki,ij,kj->k", moment, qinv, moment))
                write_trajectory_csv(sys, traj, out / f"sample_{csv_index}.csv")
                csv_index += 1
    if result.escaped_count:
        result.verdict = "ESCAPE_OBSERVED"
    if len(fits) >= 10:
        rates = np.array([f[0] for f in fits])
        result.growth_rate = float(np.median(rates))
        result.growth_rate_r2 = float(np.mean([f[1] for f in fits]))
        result.growth_samples = len(fits)
    elif fits:
        result.notes.append(f"growth rate not reported: only {len(fits)} escaping samples (need 10)")
    result.notes.append("probe evidence only: an escape refutes stability, containment over a "
                        "finite horizon does not certify it")
    return result


def _refined_max(sampler: OrbitSampler, run: dict, budget: int = 50,
                 rel_tol: float = 1e-6) -> float:
    """Largest refined orbit distance over all recorded states.

    Refinement can only lower a grid distance, so candidates are visited in
    decreasing grid distance until none can beat the best refined value by
    more than ``rel_tol`` (relative).
    """
    cands = [(d, i, k) for i, ds in enumerate(run["dists"]) for k, d in enumerate(ds)]
    if not cands:
        return 0.0
    cands.sort(key=lambda c: -c[0])
    best = -1.0
    for n, (d, i, k) in enumerate(cands):
        if d <= best * (1 + rel_tol) or n >= budget:
            break
        best = max(best, sampler.distance(run["states"][i][k]))
    return float(best)


def flow_jacobian_fd(sys: SystemDef, z0, horizon: float, dt: float, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference Jacobian of the time-``horizon`` midpoint flow map."""
    nsteps, dt = _step_count(horizon, dt)
    stepper = MidpointStepper(sys, dt)
    z0 = np.asarray(z0, dtype=float)
    cols = np.hstack([z0[:, None] + eps * np.eye(sys.dim), z0[:, None] - eps * np.eye(sys.dim)])
    for _ in range(nsteps):
        cols = stepper.step_batch(cols)
    return (cols[:, : sys.dim] - cols[:, sys.dim :]) / (2 * eps)


def linear_flow(sys: SystemDef, z0, t: float) -> np.ndarray:
    """Exact flow of a quadratic Hamiltonian, for reference checks."""
    lin = sys.omega @ sys.h.hessian(np.zeros(sys.dim))
    c0 = sys.omega @ sys.h.gradient(np.zeros(sys.dim))
    big = np.zeros((sys.dim + 1, sys.dim + 1))
    big[:-1, :-1] = lin
    big[:-1, -1] = c0
    return (scipy.linalg.expm(t * big) @ np.append(z0, 1.0))[:-1]
