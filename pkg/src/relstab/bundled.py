"""System files shipped with the package."""

from __future__ import annotations

from pathlib import Path


def _rows(m):
    return "\n".join(f"      - [{', '.join(str(x) for x in row)}]" for row in m)


def _rotation_generator(axis: int) -> list:
    """Cotangent lift of ``x -> e_axis x x`` on ``(q1, q2, q3, p1, p2, p3)``."""
    e = [[0] * 3 for _ in range(3)]
    i, j, k = axis, (axis + 1) % 3, (axis + 2) % 3
    e[k][j] = 1
    e[j][k] = -1
    a = [[0] * 6 for _ in range(6)]
    for r in range(3):
        for c in range(3):
            a[r][c] = e[r][c]
            a[r + 3][c + 3] = e[r][c]
    return a


EX16 = """\
name: EX16
description: >
  SO(2) acting on T*R^2 times T*S^1 with an S^1 symmetry translating theta.
  The relative equilibria (0, 0, 0, 0, theta, 0) are stable in the zero
  reduced space but unstable in the full phase space.
phase_space:
  coordinates: [q1, q2, p1, p2, theta, ptheta]
  pairs: [[q1, p1], [q2, p2], [theta, ptheta]]
  periodic: [theta]
algebra:
  dim: 1
  labels: [e1]
  structure_constants: []
  inner_product: [[1.0]]
generators:
  - label: e1
    A: zero
    b: [0, 0, 0, 0, 1, 0]
    c: 0.0
hamiltonian: "(q1*p2 - q2*p1) + ptheta*(p1^2 + p2^2 - q1^2 - q2^2)"
proper_action: true
"""

SO3_OSCILLATOR = f"""\
name: SO3-oscillator
description: >
  Isotropic harmonic oscillator on T*R^3 with the cotangent-lifted rotation
  action of SO(3); the moment map is q x p.
phase_space:
  coordinates: [q1, q2, q3, p1, p2, p3]
algebra:
  dim: 3
  labels: [e1, e2, e3]
  structure_constants:
    - [1, 2, 3, 1.0]
    - [2, 3, 1, 1.0]
    - [1, 3, 2, -1.0]
  inner_product: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
generators:
  - label: e1
    A:
{_rows(_rotation_generator(0))}
  - label: e2
    A:
{_rows(_rotation_generator(1))}
  - label: e3
    A:
{_rows(_rotation_generator(2))}
hamiltonian: "(q1^2 + q2^2 + q3^2 + p1^2 + p2^2 + p3^2)/2"
proper_action: true
"""

TRIVIAL_OSCILLATOR = """\
name: trivial-oscillator
description: Two-degree-of-freedom harmonic oscillator with the trivial group.
phase_space:
  coordinates: [q1, q2, p1, p2]
algebra:
  dim: 0
  structure_constants: []
generators: []
hamiltonian: "(q1^2 + q2^2 + p1^2 + p2^2)/2"
proper_action: true
"""

SYSTEMS = {
    "EX16": EX16,
    "SO3-oscillator": SO3_OSCILLATOR,
    "trivial-oscillator": TRIVIAL_OSCILLATOR,
}


def write(name: str, outdir: str | Path) -> list[Path]:
    """Write one bundled system (or ``all``) as ``<name>.yaml`` under ``outdir``."""
    names = list(SYSTEMS) if name == "all" else [name]
    for nm in names:
        if nm not in SYSTEMS:
            raise KeyError(nm)
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for nm in names:
        p = out / f"{nm}.yaml"
        p.write_text(SYSTEMS[nm], encoding="utf-8")
        paths.append(p)
    return paths
