"""Ensemble export and import with a hashed manifest.

Files in an ensemble directory (state labels are 1-based, floats are
written with ``repr`` so they reload bit for bit):

``events.csv``        path, event, time, from_state, to_state
``paths.csv``         path, x0, weight, eta_0..eta_K, f_0..f_K
``factor_jumps.csv``  path, jump, time
``manifest.json``     scenario hash and name, command, seed, n, sampler,
                      ESS, weight mean and variance, versions, and the
                      sha256 of every file above
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import platform
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .simulate import WeightedEnsemble, effective_sample_size

EVENT_COLUMNS = ["path", "event", "time", "from_state", "to_state"]
JUMP_COLUMNS = ["path", "jump", "time"]


class HashMismatchError(ValueError):
    """Ensemble files do not belong to the given scenario or are corrupted."""


def versions() -> dict:
    return {
        "cmclab": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "python": platform.python_version(),
    }


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path, data: bytes) -> None:
    """Write to a sibling temp file, then rename over ``path``."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_files(out_dir, files: dict[str, bytes]) -> None:
    """Write every file atomically; nothing is left half-written on failure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, data in files.items():
        atomic_write(out / name, data)


def _f(x) -> str:
    return repr(float(x))


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode()


def ensemble_files(e: WeightedEnsemble) -> dict[str, bytes]:
    K = e.scenario.grid.K
    ev_rows = []
    for i, j in zip(*np.nonzero(np.isfinite(e.times))):
        ev_rows.append((int(i), int(j), _f(e.times[i, j]), int(e.src[i, j]) + 1, int(e.dst[i, j]) + 1))
    path_header = ["path", "x0", "weight"] + [f"eta_{k}" for k in range(K + 1)] + [f"f_{k}" for k in range(K + 1)]
    path_rows = []
    for i in range(e.n):
        path_rows.append(
            [i, int(e.x0[i]) + 1, _f(e.weights[i])]
            + [repr(v) for v in e.eta[i].tolist()]
            + [repr(v) for v in e.factor[i].tolist()]
        )
    jump_rows = []
    fj = e.factor_jumps
    for i, j in zip(*np.nonzero(np.isfinite(fj))):
        jump_rows.append((int(i), int(j), _f(fj[i, j])))
    return {
        "events.csv": _csv(EVENT_COLUMNS, ev_rows),
        "paths.csv": _csv(path_header, path_rows),
        "factor_jumps.csv": _csv(JUMP_COLUMNS, jump_rows),
    }


def weight_stats(w) -> dict:
    w = np.asarray(w, dtype=float)
    n = len(w)
    var = float(w.var(ddof=1)) if n > 1 else 0.0
    return {
        "weight_mean": float(w.mean()),
        "weight_var": var,
        "weight_se": float(np.sqrt(var / n)) if n > 1 else 0.0,
        "ess": effective_sample_size(w),
        "zero_weights": int((w == 0).sum()),
    }


def build_manifest(e: WeightedEnsemble, files: dict[str, bytes], command: dict, extra=None) -> dict:
    m = {
        "scenario": e.scenario.name,
        "scenario_hash": e.scenario.hash,
        "command": command,
        "seed": e.seed,
        "n": e.n,
        "sampler": e.sampler,
        **weight_stats(e.weights),
        "versions": versions(),
        "files": {name: sha256_bytes(data) for name, data in sorted(files.items())},
    }
    if extra:
        m.update(extra)
    return m


def dumps(doc) -> bytes:
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def save_ensemble(e: WeightedEnsemble, out_dir, command=None, extra=None) -> dict:
    files = ensemble_files(e)
    manifest = build_manifest(e, files, command or {}, extra)
    write_files(out_dir, {**files, "manifest.json": dumps(manifest)})
    return manifest


def _table(text: str, cols: int) -> np.ndarray:
    body = text.split("\n", 1)[1] if "\n" in text else ""
    if not body.strip():
        return np.empty((0, cols))
    return np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)


def load_manifest(ens_dir) -> dict:
    with open(Path(ens_dir) / "manifest.json") as fh:
        return json.load(fh)


def load_ensemble(ens_dir, scenario) -> WeightedEnsemble:
    """Rebuild an ensemble; file hashes and the scenario hash must match."""
    d = Path(ens_dir)
    manifest = load_manifest(d)
    if manifest.get("scenario_hash") != scenario.hash:
        raise HashMismatchError("ensemble was produced from a different scenario")
    raw = {}
    for name, digest in manifest["files"].items():
        data = (d / name).read_bytes()
        if sha256_bytes(data) != digest:
            raise HashMismatchError(f"{name} does not match its manifest hash")
        raw[name] = data.decode()
    K = scenario.grid.K
    n = int(manifest["n"])
    paths = _table(raw["paths.csv"], 3 + 2 * (K + 1))
    x0 = paths[:, 1].astype(np.int64) - 1
    eta = paths[:, 3:3 + K + 1]
    factor = paths[:, 4 + K:4 + 2 * (K + 1)]
    ev = _table(raw["events.csv"], len(EVENT_COLUMNS))
    width = max(1, int(ev[:, 1].max()) + 1) if len(ev) else 1
    times = np.full((n, width), np.inf)
    src = np.full((n, width), -1, dtype=np.int64)
    dst = np.full((n, width), -1, dtype=np.int64)
    if len(ev):
        i, j = ev[:, 0].astype(int), ev[:, 1].astype(int)
        times[i, j] = ev[:, 2]
        src[i, j] = ev[:, 3].astype(int) - 1
        dst[i, j] = ev[:, 4].astype(int) - 1
    fj = _table(raw["factor_jumps.csv"], len(JUMP_COLUMNS))
    if len(fj):
        fw = int(fj[:, 1].max()) + 1
        fjumps = np.full((n, fw), np.nan)
        fjumps[fj[:, 0].astype(int), fj[:, 1].astype(int)] = fj[:, 2]
    else:
        fjumps = np.empty((n, 0))
    return WeightedEnsemble(scenario, int(manifest["seed"]), manifest.get("sampler", "reference"),
                            factor, fjumps, x0, times, src, dst, eta)


def field_entries_csv(field, s_node: int, entries=None) -> bytes:
    """``p_{xy}(s, t)`` for every node ``t >= s``; ``entries`` are ``(x, y)`` labels."""
    d = field.d
    entries = entries or [(x, y) for x in range(1, d + 1) for y in range(1, d + 1)]
    rows = []
    for t in range(s_node, field.grid.K + 1):
        P = field.at_nodes(s_node, t)
        rows.append([_f(field.grid.nodes[t])] + [_f(P[x - 1, y - 1]) for x, y in entries])
    return _csv(["t"] + [f"p{x}{y}" for x, y in entries], rows)


def field_pairs_json(field, pairs) -> dict:
    nodes = field.grid.nodes
    return {
        "pairs": [
            {"s": float(nodes[i]), "t": float(nodes[j]), "P": field.at_nodes(i, j).tolist()}
            for i, j in pairs
        ]
    }
