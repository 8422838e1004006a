"""Command-line interface: ``relstab validate | analyze | probe | examples``.

Exit codes
----------
validate  0 all checks pass, 1 a validator failed, 2 unreadable or unparsable file
analyze   0 STABLE_CERTIFIED, 3 inconclusive, 1 not a relative equilibrium,
          2 unusable input, 4 internal analysis failure
probe     0 probe completed (either verdict), 1 not a relative equilibrium,
          2 unusable input, 4 integration failure
examples  0 written, 2 unknown name
"""

from __future__ import annotations

import argparse
import json
import logging
import sys as _sys
from pathlib import Path

import numpy as np

from relstab import __version__, bundled, sysfile
from relstab import dynamics as dyn
from relstab import slice_stability as ss
from relstab.equilibria import RE_TOL, characterize, refine_relative_equilibrium
from relstab.errors import (ExprSyntaxError, IntegrationError, NewtonError, RelstabError,
                            SystemFileError, ValidationError)

SCHEMA = 1
EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_INCONCLUSIVE, EXIT_INTERNAL = 0, 1, 2, 3, 4

log = logging.getLogger("relstab")


class UsageError(Exception):
    pass


def _floats(text: str | None, what: str) -> list:
    if text is None:
        return []
    parts = [p for p in text.replace(",", " ").split() if p]
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"{what}: cannot parse {text!r} as a list of numbers") from None


def _point(loaded, text: str) -> np.ndarray:
    vals = _floats(text, "--point")
    n = loaded.system.dim
    if len(vals) != n:
        raise UsageError(f"--point needs {n} values ({', '.join(loaded.system.space.names)}), "
                         f"got {len(vals)}")
    return np.array(vals)


def _coord_indices(loaded, text: str | None) -> list | None:
    if text is None:
        return None
    names = loaded.system.space.names
    out = []
    for tok in text.replace(",", " ").split():
        if tok in names:
            out.append(names.index(tok))
        elif tok.isdigit() and int(tok) < len(names):
            out.append(int(tok))
        else:
            raise UsageError(f"unknown coordinate {tok!r}")
    return out


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating,)):
        return float(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    if isinstance(x, ss.Verdict):
        return x.value
    return x


def _emit(report: dict, dest: str | None) -> None:
    text = json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"
    if dest == "-":
        _sys.stdout.write(text)
    elif dest:
        Path(dest).write_text(text, encoding="utf-8")


def _diag(**fields) -> None:
    _sys.stderr.write(json.dumps(_jsonable(fields), sort_keys=True) + "\n")


def _thresholds(rel_tol: float) -> dict:
    return {
        "relative_equilibrium": RE_TOL,
        "definiteness_relative": rel_tol,
        "critical_point": ss.CRITICAL_TOL,
        "descent": ss.DESCENT_TOL,
        "kernel_rank": ss.KERNEL_RANK_TOL,
        "containment": ss.CONTAINMENT_TOL,
        "omega_det": ss.OMEGA_DET_TOL,
    }


def _header(command: str, loaded) -> dict:
    return {"schema": SCHEMA, "tool": "relstab", "version": __version__, "command": command,
            "system": {"name": loaded.system.name, "digest": loaded.digest,
                       "coordinates": list(loaded.system.space.names)}}


def _load(path: str, validate: bool = True):
    try:
        return sysfile.load(path, validate)
    except OSError as exc:
        raise SystemFileError(f"cannot read {path}: {exc.strerror or exc}") from None


def _re_dict(re, refined: bool) -> dict:
    return {"point": re.point, "xi": re.xi, "residual": re.residual, "mu": re.mu,
            "isotropy_dim": re.isotropy.rank, "isotropy_basis": re.isotropy.basis,
            "xi_in_g_mu": re.xi_in_g_mu, "xi_perp_g_m": re.xi_perp_g_m,
            "coadjoint_defect": re.coadjoint_defect, "iterations": re.iterations,
            "refined": refined}


def _relative_equilibrium(loaded, point, xi_text: str, refine: bool, freeze):
    sys = loaded.system
    xi = None
    if xi_text not in (None, "auto"):
        xi = np.array(_floats(xi_text, "--xi"))
        if xi.size != sys.algebra.dim:
            raise UsageError(f"--xi needs {sys.algebra.dim} values, got {xi.size}")
    if refine:
        return refine_relative_equilibrium(sys, point, xi, freeze=freeze or ()), True
    return characterize(sys, point, xi), False


# -- commands ----------------------------------------------------------------


def cmd_validate(args) -> int:
    try:
        loaded = _load(args.file, validate=False)
        residuals = sysfile.validate_loaded(loaded)
    except (SystemFileError, ExprSyntaxError) as exc:
        _diag(check="parse", status="error", message=getattr(exc, "message", str(exc)),
              line=getattr(exc, "line", None), column=getattr(exc, "column", None))
        print(f"{args.file}: parse error: {exc}")
        return EXIT_INPUT
    except ValidationError as exc:
        _diag(check=exc.check, status="fail", message=exc.message, residual=exc.residual,
              line=exc.line, detail=exc.detail)
        print(f"{args.file}: {exc}")
        return EXIT_FAIL
    for check in sorted(residuals):
        _diag(check=check, status="ok", residual=residuals[check])
    print(f"{args.file}: ok ({loaded.system.name}, digest {loaded.digest[:12]})")
    return EXIT_OK


def _analysis(loaded, args) -> tuple:
    """Run refine/velocity/slice/verdict; returns ``(report, exit_code)``."""
    sys = loaded.system
    point = _point(loaded, args.point)
    report = _header("analyze", loaded)
    report["input_point"] = point
    report["thresholds"] = _thresholds(args.rel_tol)
    try:
        re, refined = _relative_equilibrium(loaded, point, args.xi, args.refine,
                                            _coord_indices(loaded, args.freeze))
    except NewtonError as exc:
        report["error"] = {"kind": "newton", "message": str(exc), "iterations": exc.iterations,
                           "null_vector": exc.null_vector}
        return report, EXIT_FAIL
    report["relative_equilibrium"] = _re_dict(re, refined)
    if not re.is_valid():
        report["error"] = {"kind": "not_relative_equilibrium", "residual": re.residual,
                           "tolerance": RE_TOL}
        return report, EXIT_FAIL
    try:
        data = ss.symplectic_slice(sys, re.point)
        rep = ss.stability_verdict(sys, re, args.rel_tol, data)
    except (ss.SliceError, ss.ConsistencyError) as exc:
        report["error"] = {"kind": type(exc).__name__, "message": str(exc)}
        return report, EXIT_INTERNAL
    report["slice"] = {"kernel_dim": data.kernel.shape[1], "kernel_basis": data.kernel,
                       "tangent_g_dim": data.tangent_g.shape[1],
                       "tangent_h_dim": data.tangent_h.shape[1], "tangent_h_basis": data.tangent_h,
                       "dim": data.dim, "slice_basis": data.slice_basis,
                       "omega_slice": data.omega_slice, "jacobian_rank": data.jacobian_rank,
                       "regular": data.regular}
    report["stability"] = {"verdict": rep.verdict, "definiteness": rep.definiteness,
                           "eigenvalues": rep.eigenvalues, "signature": list(rep.signature),
                           "kernel_match": rep.kernel_match, "kernel_verdict": rep.kernel_verdict,
                           "regular_point": rep.regular_point, "sign": rep.sign,
                           "threshold": rep.threshold, "slice_dim": rep.slice_dim,
                           "invariance_residual": rep.invariance_residual, "notes": rep.notes}
    code = EXIT_OK if rep.verdict is ss.Verdict.STABLE_CERTIFIED else EXIT_INCONCLUSIVE
    return report, code


def _printer(args):
    """Human-readable output goes to stderr when the JSON report occupies stdout."""
    stream = _sys.stderr if args.json == "-" else _sys.stdout
    return lambda *a: print(*a, file=stream)


def _print_analysis(report: dict, print=print) -> None:
    print(f"system {report['system']['name']} (digest {report['system']['digest'][:12]})")
    re = report.get("relative_equilibrium")
    if re:
        print(f"residual {re['residual']:.3e}  xi = {_fmt(re['xi'])}  mu = {_fmt(re['mu'])}"
              + (f"  (refined in {re['iterations']} iterations)" if re["refined"] else ""))
    if "error" in report:
        err = report["error"]
        if err["kind"] == "not_relative_equilibrium":
            print(f"not a relative equilibrium: residual {err['residual']:.3e} "
                  f"exceeds {err['tolerance']:.0e} (use --refine to search nearby)")
        else:
            print(f"error: {err['message']}")
        return
    sl, st = report["slice"], report["stability"]
    print(f"slice dimension {sl['dim']} (ker dPhi {sl['kernel_dim']}, T_H {sl['tangent_h_dim']}), "
          f"regular point: {'yes' if sl['regular'] else 'no'}")
    print(f"verdict {st['verdict'].value if hasattr(st['verdict'], 'value') else st['verdict']} "
          f"({st['definiteness']}), eigenvalues {_fmt(st['eigenvalues'])}, "
          f"signature {tuple(st['signature'])}")
    for note in st["notes"]:
        print(f"note: {note}")


def _fmt(v) -> str:
    return "[" + ", ".join(f"{float(x):.6g}" for x in np.ravel(v)) + "]"


def cmd_analyze(args) -> int:
    try:
        loaded = _load(args.file)
        report, code = _analysis(loaded, args)
    except (SystemFileError, ExprSyntaxError, ValidationError, UsageError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_INPUT
    _print_analysis(report, _printer(args))
    _emit(report, args.json)
    return code


def cmd_probe(args) -> int:
    try:
        loaded = _load(args.file)
        sys = loaded.system
        point = _point(loaded, args.point)
        radii = _floats(args.radii, "--radii")
        offset = None
        if args.offset is not None:
            offset = np.array(_floats(args.offset, "--offset"))
            if offset.size != sys.dim:
                raise UsageError(f"--offset needs {sys.dim} values, got {offset.size}")
        perturb = _coord_indices(loaded, args.perturb)
        re, refined = _relative_equilibrium(loaded, point, args.xi, args.refine, None)
    except (SystemFileError, ExprSyntaxError, ValidationError, UsageError) as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_INPUT
    except NewtonError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_FAIL
    report = _header("probe", loaded)
    report["relative_equilibrium"] = _re_dict(re, refined)
    if not re.is_valid():
        _printer(args)(f"not a relative equilibrium: residual {re.residual:.3e} "
                       f"exceeds {RE_TOL:.0e}")
        report["error"] = {"kind": "not_relative_equilibrium", "residual": re.residual,
                           "tolerance": RE_TOL}
        _emit(report, args.json)
        return EXIT_FAIL
    try:
        res = dyn.stability_probe(sys, re, radii, args.horizon, args.samples, args.dt, args.seed,
                                  args.escape_factor, perturb, offset, csv_dir=args.csv)
    except IntegrationError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_INTERNAL
    report["probe"] = {
        "verdict": res.verdict, "radii": res.radii, "seed": res.seed, "horizon": res.horizon,
        "dt": res.dt, "samples_per_radius": res.samples_per_radius,
        "escape_radius": res.escape_radius, "offset": offset, "perturb": perturb,
        "per_radius": [{"radius": o.radius, "max_distance": o.max_distance, "escaped": o.escaped,
                        "escape_time": o.escape_time, "initial_distance": o.initial_distance}
                       for o in res.outcomes],
        "growth_rate": res.growth_rate, "growth_rate_r2": res.growth_rate_r2,
        "growth_samples": res.growth_samples, "orbit_resolution": res.orbit_resolution,
        "orbit_fallback": res.orbit_fallback, "notes": res.notes,
    }
    say = _printer(args)
    say(f"system {sys.name}: {res.verdict} over T = {res.horizon:g} (dt = {res.dt:g}, "
          f"escape radius {res.escape_radius:g})")
    for o in res.outcomes:
        say(f"  delta {o.radius:g}: max orbit distance {o.max_distance:.6g}, "
              f"escaped {sum(o.escaped)}/{len(o.escaped)}")
    if res.growth_rate is not None:
        say(f"  growth rate {res.growth_rate:.6g} (R^2 {res.growth_rate_r2:.4f}, "
              f"{res.growth_samples} samples)")
    for note in res.notes:
        say(f"note: {note}")
    _emit(report, args.json)
    return EXIT_OK


def cmd_examples(args) -> int:
    try:
        paths = bundled.write(args.name, args.outdir)
    except KeyError:
        print(f"unknown example {args.name!r}; available: {', '.join(bundled.SYSTEMS)}, all",
              file=_sys.stderr)
        return EXIT_INPUT
    for p in paths:
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relstab", description="Stability of relative equilibria "
                                "of Hamiltonian systems with symmetry.")
    p.add_argument("--version", action="version", version=f"relstab {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a system file")
    v.add_argument("file")
    v.set_defaults(func=cmd_validate)

    def common(q):
        q.add_argument("file")
        q.add_argument("--point", required=True, help="phase-space point, comma separated")
        q.add_argument("--xi", default="auto", help="'auto' (least squares) or a vector")
        q.add_argument("--refine", action="store_true",
                       help="Newton-refine the point to a nearby relative equilibrium first")
        q.add_argument("--json", metavar="OUT", help="write the JSON report ('-' for stdout)")

    a = sub.add_parser("analyze", help="slice Hessian verdict at a point")
    common(a)
    a.add_argument("--freeze", help="coordinates held fixed during --refine")
    a.add_argument("--rel-tol", type=float, default=ss.DEFINITENESS_TOL,
                   help="relative definiteness threshold")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("probe", help="integrate perturbations and look for escapes")
    common(r)
    r.add_argument("--radii", default="1e-3", help="perturbation radii, comma separated")
    r.add_argument("--horizon", type=float, default=100.0, help="integration time T")
    r.add_argument("--dt", type=float, default=1e-3, help="midpoint step size")
    r.add_argument("--samples", type=int, default=8, help="samples per radius")
    r.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    r.add_argument("--escape-factor", type=float, default=100.0,
                   help="a sample escapes once its orbit distance exceeds this times the "
                        "largest radius")
    r.add_argument("--perturb", help="coordinates to perturb (default all)")
    r.add_argument("--offset", help="fixed displacement added to every sample")
    r.add_argument("--csv", metavar="DIR", help="dump sample_<i>.csv trajectories")
    r.set_defaults(func=cmd_probe)

    e = sub.add_parser("examples", help="write bundled system files")
    e.add_argument("name", help=f"one of {', '.join(bundled.SYSTEMS)} or 'all'")
    e.add_argument("outdir", nargs="?", default=".")
    e.set_defaults(func=cmd_examples)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except RelstabError as exc:
        print(f"error: {exc}", file=_sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    raise SystemExit(main())
