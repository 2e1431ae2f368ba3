"""Command line entry point: ``cmclab {simulate,field,diagnose,oracle}``.

Exit codes: 0 success or all checks passed, 1 a check failed, 2 invalid
input (schema, non-node time, hash mismatch, bad suite, size guard),
3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io as cio
from .core import FactorPath, ScaledIntensity
from .diagnostics import RESIDUALS, CMCTestReport, MartingaleTestReport, cmc_conditional_test, path_functionals
from .kolmogorov import PeanoBakerConvergenceError, magnus2_pieces, peano_baker_pieces, transition_field
from .oracle import OracleSizeError, discrete_from_dict, verify_all
from .scenario import ScenarioError, read_json, scenario_from_dict, shipped_path
from .simulate import build_weighted_ensemble, intensity_path, sample_direct_ensemble, sample_factor

ORACLE_TOL = 1e-12
SUITES = ("M", "K", "L", "N", "CMC", "CMC_PAST")


class UsageError(Exception):
    """Invalid input; maps to exit code 2."""


def _scenario_doc(arg: str) -> dict:
    p = Path(arg)
    if not p.exists():
        try:
            p = shipped_path(arg)
        except (ModuleNotFoundError, FileNotFoundError):
            pass
    if not p.exists():
        raise FileNotFoundError(f"scenario {arg!r} not found")
    try:
        return read_json(p)
    except json.JSONDecodeError as exc:
        raise UsageError(f"scenario is not valid JSON: {exc}") from exc


def _load_continuous(arg):
    try:
        return scenario_from_dict(_scenario_doc(arg))
    except ScenarioError as exc:
        raise UsageError(str(exc)) from exc


def _emit(doc, out):
    data = cio.dumps(doc)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        cio.atomic_write(out, data)
    else:
        sys.stdout.write(data.decode())


def _command(args, *keys) -> dict:
    return {"subcommand": args.cmd, **{k: getattr(args, k) for k in keys}}


def run_simulate(args) -> int:
    sc = _load_continuous(args.scenario)
    if args.n < 1:
        raise UsageError("--n must be positive")
    t0 = time.perf_counter()
    if args.sampler == "reference":
        e = build_weighted_ensemble(sc, args.n, args.seed)
    else:
        e = sample_direct_ensemble(sc, args.n, args.seed)
    extra = {"wall_clock_s": time.perf_counter() - t0} if args.timing else None
    cmd = _command(args, "scenario", "n", "seed", "sampler")
    m = cio.save_ensemble(e, args.out, cmd, extra)
    sys.stdout.write(cio.dumps({k: m[k] for k in ("n", "seed", "ess", "weight_mean", "weight_se")}).decode())
    return 0


def _factor_path(sc, args) -> FactorPath:
    if args.factor:
        doc = read_json(args.factor)
        values = doc["values"] if isinstance(doc, dict) else doc
        jumps = doc.get("jump_times", []) if isinstance(doc, dict) else []
        try:
            return FactorPath(sc.grid, np.asarray(values, dtype=float), np.asarray(jumps, dtype=float))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return sample_factor(sc.driver, sc.grid, args.seed)


def run_field(args) -> int:
    sc = _load_continuous(args.scenario)
    grid = sc.grid
    try:
        i, j = grid.node_index(args.s), grid.node_index(args.t)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if i > j:
        raise UsageError("need s <= t")
    f = _factor_path(sc, args)
    field = transition_field(sc.model, f, grid)
    G = intensity_path(sc.model, f)[i:j]
    exact = field.at_nodes(i, j)
    try:
        pb, order = peano_baker_pieces(G, grid.dt, tol=1e-10)
    except PeanoBakerConvergenceError as exc:
        pb, order = exc.partial, exc.order
    mg = magnus2_pieces(G, grid.dt, tol=args.magnus_tol)
    diffs = {
        "exp_vs_pb": float(np.abs(exact - pb).max()),
        "exp_vs_magnus": float(np.abs(exact - mg).max()),
        "pb_vs_magnus": float(np.abs(pb - mg).max()),
    }
    agree = max(diffs.values()) < 1e-6
    doc = {
        "scenario": sc.name,
        "scenario_hash": sc.hash,
        "factor": "file" if args.factor else {"seed": args.seed},
        "s": float(grid.nodes[i]),
        "t": float(grid.nodes[j]),
        "routes": {"exponential": exact.tolist(), "peano_baker": pb.tolist(), "magnus2": mg.tolist()},
        "peano_baker_order": order,
        "agreement": {**diffs, "tolerance": 1e-6, "agree": agree},
        "versions": cio.versions(),
    }
    _emit(doc, args.out)
    return 0


def _suite(arg: str) -> list[str]:
    if arg is None or arg.strip() == "":
        raise UsageError("empty suite")
    if arg.strip().lower() == "all":
        return list(SUITES)
    items = [s.strip() for s in arg.split(",") if s.strip()]
    if not items:
        raise UsageError("empty suite")
    bad = [s for s in items if s not in SUITES]
    if bad:
        raise UsageError(f"unknown suite entries {bad}; choose from {list(SUITES)} or 'all'")
    return items


def _concat_csv(reports) -> bytes:
    """One header, then the rows of every report."""
    parts = [r.to_csv() for r in reports]
    if not parts:
        return b""
    return (parts[0] + "".join(p.split("\n", 1)[1] for p in parts[1:])).encode()


def run_diagnose(args) -> int:
    suite = _suite(args.suite)
    sc = _load_continuous(args.scenario)
    try:
        e = cio.load_ensemble(args.ensemble, sc)
    except cio.HashMismatchError as exc:
        raise UsageError(str(exc)) from exc
    model = sc.model
    if args.override_intensity_scale != 1.0:
        model = ScaledIntensity(model, args.override_intensity_scale)
    t0 = time.perf_counter()
    pf = path_functionals(e, model)
    reports = []
    for name in suite:
        if name in RESIDUALS:
            reports.append(RESIDUALS[name](e, model, pf=pf))
        elif name == "CMC":
            reports.append(cmc_conditional_test(e, model, pf=pf))
        else:
            K = sc.grid.K
            reports.append(cmc_conditional_test(e, model, past=max(0, (K // 2) // 2), pf=pf))
    passed = all(r.passed for r in reports)
    doc = {
        "scenario": sc.name,
        "scenario_hash": sc.hash,
        "ensemble_seed": e.seed,
        "n": e.n,
        "intensity_scale": args.override_intensity_scale,
        "suite": suite,
        "passed": passed,
        "reports": [r.summary() for r in reports],
        "versions": cio.versions(),
    }
    if args.timing:
        doc["wall_clock_s"] = time.perf_counter() - t0
    if args.out:
        files = {
            "diagnostics.json": cio.dumps({**doc, "details": [r.to_dict() for r in reports]}),
            "scores.csv": _concat_csv(r for r in reports if isinstance(r, MartingaleTestReport)),
            "cmc.csv": _concat_csv(r for r in reports if isinstance(r, CMCTestReport)),
        }
        cio.write_files(args.out, files)
    sys.stdout.write(cio.dumps({k: doc[k] for k in ("suite", "passed", "reports")}).decode())
    return 0 if passed else 1


def run_oracle(args) -> int:
    doc = _scenario_doc(args.scenario)
    try:
        sc = discrete_from_dict(doc)
    except OracleSizeError as exc:
        raise UsageError(str(exc)) from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid discrete scenario: {exc}") from exc
    checks = verify_all(sc)
    passed = all(v < ORACLE_TOL for v in checks.values())
    out = {
        "scenario": sc.name,
        "tolerance": ORACLE_TOL,
        "checks": checks,
        "failed": sorted(k for k, v in checks.items() if not v < ORACLE_TOL),
        "passed": passed,
        "versions": cio.versions(),
    }
    _emit(out, args.out)
    return 0 if passed else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmclab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("simulate", help="weighted (or direct) ensemble to CSV plus manifest")
    s.add_argument("--scenario", required=True, help="scenario JSON file or shipped name")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--sampler", choices=("reference", "direct"), default="reference")
    s.add_argument("--timing", action="store_true", help="record wall-clock time in the manifest")
    s.set_defaults(func=run_simulate)

    f = sub.add_parser("field", help="P(s,t) by three routes with an agreement report")
    f.add_argument("--scenario", required=True)
    f.add_argument("--s", type=float, required=True)
    f.add_argument("--t", type=float, required=True)
    f.add_argument("--seed", type=int, default=0, help="seed of the sampled factor path")
    f.add_argument("--factor", help="JSON file with factor node values (overrides --seed)")
    f.add_argument("--magnus-tol", type=float, default=1e-7)
    f.add_argument("--out", help="output JSON file (default: stdout)")
    f.set_defaults(func=run_field)

    d = sub.add_parser("diagnose", help="martingale and conditional Markov tests on an ensemble")
    d.add_argument("--scenario", required=True)
    d.add_argument("--ensemble", required=True, help="directory written by simulate")
    d.add_argument("--suite", default="all", help=f"comma list of {','.join(SUITES)} or 'all'")
    d.add_argument("--override-intensity-scale", type=float, default=1.0,
                   help="score against the intensity multiplied by this factor")
    d.add_argument("--out", help="directory for diagnostics.json and CSV tables")
    d.add_argument("--timing", action="store_true")
    d.set_defaults(func=run_diagnose)

    o = sub.add_parser("oracle", help="exact verification on a discrete scenario")
    o.add_argument("--scenario", required=True)
    o.add_argument("--out", help="output JSON file (default: stdout)")
    o.set_defaults(func=run_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cmclab: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"cmclab: I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
