"""YAML system files: loading, line-anchored diagnostics, canonical digest.

Layout (one document per file)::

    name: EX16
    phase_space:
      coordinates: [q1, q2, p1, p2, theta, ptheta]
      pairs: [[q1, p1], [q2, p2], [theta, ptheta]]   # optional
      periodic: [theta]                               # optional
    algebra:
      dim: 1
      structure_constants: []        # [i, j, k, value], 1-based, i < j
      inner_product: [[1.0]]         # optional, identity by default
      rank_tol: 1.0e-10              # optional
    generators:                      # one per basis element
      - A: zero                      # dense 2n x 2n, or "zero"
        b: [0, 0, 0, 0, 1, 0]        # optional, zero by default
        c: 0.0                       # optional moment offset
    hamiltonian: "q1*p2 - q2*p1 + ..."
    proper_action: true              # user assertion, not checked
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from relstab import exprcalc as ec
from relstab.errors import ExprSyntaxError, SystemFileError, ValidationError
from relstab.liealg import LieAlgebraSpec
from relstab.linalg import DEFAULT_RANK_TOL
from relstab.phasespace import ActionGenerator, PhaseSpace, SystemDef, validate_system


@dataclass
class LoadedSystem:
    system: SystemDef
    digest: str
    data: dict
    lines: dict
    residuals: dict | None = None


def canonical_digest(data) -> str:
    text = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _line_map(node, path=(), out=None) -> dict:
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_map(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, path + (i,), out)
    return out


def parse_text(text: str) -> tuple:
    """Return ``(data, line_map)``; raise :class:`SystemFileError` on syntax errors."""
    if not text.strip():
        raise SystemFileError("empty system file", 1, 1)
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        raise SystemFileError(f"YAML syntax error: {exc.problem}",
                              mark.line + 1 if mark else None,
                              mark.column + 1 if mark else None) from exc
    if not isinstance(data, dict):
        raise SystemFileError("system file must be a mapping", 1, 1)
    return data, _line_map(node)


class _Builder:
    def __init__(self, data: dict, lines: dict):
        self.data = data
        self.lines = lines

    def line(self, *path) -> int | None:
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def fail(self, msg: str, *path):
        raise SystemFileError(msg, self.line(*path))

    def get(self, mapping, key, *path, required=True, default=None):
        if not isinstance(mapping, dict):
            self.fail("expected a mapping", *path)
        if key not in mapping:
            if required:
                self.fail(f"missing key {key!r}", *path)
            return default
        return mapping[key]

    def matrix(self, value, shape, *path) -> np.ndarray:
        if value in (None, 0, "zero"):
            return np.zeros(shape)
        try:
            arr = np.array(value, dtype=float)
        except (TypeError, ValueError):
            self.fail("expected a numeric array", *path)
        if arr.size == 0 and int(np.prod(shape)) == 0:
            return np.zeros(shape)
        if arr.shape != tuple(shape):
            self.fail(f"expected shape {tuple(shape)}, got {arr.shape}", *path)
        return arr

    def build(self) -> SystemDef:
        d = self.data
        ps = self.get(d, "phase_space")
        names = self.get(ps, "coordinates", "phase_space")
        if not isinstance(names, list) or not all(isinstance(x, str) for x in names):
            self.fail("coordinates must be a list of names", "phase_space", "coordinates")
        index = {nm: i for i, nm in enumerate(names)}

        def idx(nm, *path):
            if nm not in index:
                self.fail(f"unknown coordinate {nm!r}", *path)
            return index[nm]

        pairs = tuple((idx(a, "phase_space", "pairs"), idx(b, "phase_space", "pairs"))
                      for a, b in (ps.get("pairs") or []))
        per_names = ps.get("periodic") or []
        periodic = tuple(nm in per_names for nm in names) if per_names else ()
        for nm in per_names:
            idx(nm, "phase_space", "periodic")
        try:
            space = PhaseSpace(tuple(names), pairs, periodic)
        except ValidationError as exc:
            raise SystemFileError(exc.message, self.line("phase_space")) from exc

        alg = self.get(d, "algebra")
        dim = int(self.get(alg, "dim", "algebra"))
        triples = alg.get("structure_constants") or []
        for t_i, t in enumerate(triples):
            if not isinstance(t, list) or len(t) != 4:
                self.fail("structure constants are [i, j, k, value] entries",
                          "algebra", "structure_constants", t_i)
            if not all(1 <= int(x) <= dim for x in t[:3]):
                self.fail(f"index out of range in {t}", "algebra", "structure_constants", t_i)
        q = self.matrix(alg.get("inner_product"), (dim, dim), "algebra", "inner_product") \
            if alg.get("inner_product") is not None else np.eye(dim)
        try:
            algebra = LieAlgebraSpec.from_triples(
                dim, triples, q, tuple(alg.get("labels") or ()),
                float(alg.get("rank_tol", DEFAULT_RANK_TOL)))
        except ValidationError as exc:
            raise SystemFileError(exc.message, self.line("algebra", "structure_constants")) from exc

        gens_raw = d.get("generators") or []
        if len(gens_raw) != dim:
            self.fail(f"expected {dim} generators, found {len(gens_raw)}", "generators")
        n2 = space.dim
        gens = []
        for k, g in enumerate(gens_raw):
            if not isinstance(g, dict):
                self.fail("generator entries must be mappings", "generators", k)
            a = self.matrix(g.get("A"), (n2, n2), "generators", k, "A")
            b = self.matrix(g.get("b"), (n2,), "generators", k, "b")
            gens.append(ActionGenerator(a, b, float(g.get("c", 0.0))))

        htext = self.get(d, "hamiltonian")
        if not isinstance(htext, (str, int, float)):
            self.fail("hamiltonian must be a string", "hamiltonian")
        try:
            h = ec.parse(str(htext), space.names)
        except ExprSyntaxError as exc:
            raise SystemFileError(f"hamiltonian: {exc.message} (byte {exc.offset})",
                                  self.line("hamiltonian")) from exc
        for k, g in enumerate(gens):
            r = g.sp_residual(space.omega)
            if not r < 1e-10:
                raise ValidationError("sp_condition", f"generator {k + 1} is not infinitesimally "
                                      f"symplectic (residual {r:.3e})", r,
                                      line=self.line("generators", k))
        return SystemDef(space, algebra, gens, h, name=str(d.get("name", "")),
                         proper_action=d.get("proper_action"))


_CHECK_PATHS = {
    "antisymmetry": ("algebra", "structure_constants"),
    "jacobi": ("algebra", "structure_constants"),
    "inner_product": ("algebra", "inner_product"),
    "equivariance": ("generators",),
    "hamiltonian_invariance": ("hamiltonian",),
    "periodic": ("generators",),
    "sp_condition": ("generators",),
}


def validate_loaded(loaded: LoadedSystem) -> dict:
    """Run the validators, anchoring any failure to a line of the file."""
    try:
        loaded.residuals = validate_system(loaded.system)
    except ValidationError as exc:
        b = _Builder(loaded.data, loaded.lines)
        path = _CHECK_PATHS.get(exc.check, ())
        if exc.check in ("sp_condition", "periodic") and "generator" in exc.detail:
            path = ("generators", exc.detail["generator"] - 1)
        exc.line = exc.line or b.line(*path)
        exc.args = (f"line {exc.line}: {exc.check}: {exc.message}",)
        raise
    return loaded.residuals


def load_text(text: str, validate: bool = True) -> LoadedSystem:
    data, lines = parse_text(text)
    sys = _Builder(data, lines).build()
    loaded = LoadedSystem(sys, canonical_digest(data), data, lines)
    if validate:
        validate_loaded(loaded)
    return loaded


def load(path: str | Path, validate: bool = True) -> LoadedSystem:
    return load_text(Path(path).read_text(encoding="utf-8"), validate)
