"""Monte Carlo checks of martingale and conditional-Markov properties.

A process ``V`` observed at grid nodes is tested by the weighted
orthogonality ``E_P[phi_s (V_t - V_s)] = 0`` for every adapted test
function ``phi`` in a finite dictionary.  Paths come from a weighted
ensemble, so every statistic is a weighted mean over reference-measure
samples with standard error ``std(w phi dV) / sqrt(n)``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .core import IntensityModel
from .kolmogorov import solve_zy_batch
from .simulate import WeightedEnsemble, effective_sample_size, occupation

Z_THRESHOLD = 3.9
MAX_TESTS = 200


# -- test functions ------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """Bounded functional of the factor and chain histories up to ``s``.

    ``fn(factor_hist, state_hist)`` receives arrays of shape ``(n, s+1)``
    (states 0-based) and returns ``(n,)``.
    """

    __test__ = False
    name: str
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TestFunctionDictionary:
    __test__ = False
    functions: tuple[TestFunction, ...]

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.functions]

    def evaluate(self, factor: np.ndarray, states: np.ndarray) -> np.ndarray:
        """``(n, K+1, J)`` values; node ``s`` only sees columns ``0..s``."""
        n, K1 = states.shape
        out = np.empty((n, K1, len(self.functions)))
        for s in range(K1):
            fh = factor[:, : s + 1].copy()
            xh = states[:, : s + 1].copy()
            fh.flags.writeable = False
            xh.flags.writeable = False
            for j, tf in enumerate(self.functions):
                out[:, s, j] = tf.fn(fh, xh)
        return out


def default_dictionary(d: int, threshold: float = 0.0) -> TestFunctionDictionary:
    """Constant, state indicators, a factor threshold and their products."""
    funcs = [TestFunction("1", lambda f, x: np.ones(len(x)))]
    for a in range(d):
        funcs.append(TestFunction(f"H{a + 1}", lambda f, x, a=a: (x[:, -1] == a).astype(float)))
    funcs.append(TestFunction("f>0", lambda f, x: (f[:, -1] > threshold).astype(float)))
    for a in range(d):
        funcs.append(TestFunction(
            f"f>0*H{a + 1}",
            lambda f, x, a=a: ((f[:, -1] > threshold) & (x[:, -1] == a)).astype(float),
        ))
    return TestFunctionDictionary(tuple(funcs))


def default_pairs(K: int, segments: int = 5) -> list[tuple[int, int]]:
    """Consecutive pairs of a coarse sub-grid with at most ``segments`` pieces."""
    idx = np.unique(np.round(np.linspace(0, K, min(K, segments) + 1)).astype(int))
    return [(int(a), int(b)) for a, b in zip(idx[:-1], idx[1:])]


# -- precomputed path functionals ---------------------------------------------


@dataclass
class PathFunctionals:
    """Node-level quantities shared by the residual tests."""

    G: np.ndarray  # (n, K, d, d)
    H: np.ndarray  # (n, K+1, d)
    states: np.ndarray  # (n, K+1)
    occ: np.ndarray  # (n, K, d)
    counts: np.ndarray  # (n, K+1, d, d) cumulative transition counts
    weights: np.ndarray
    factor: np.ndarray
    dt: float
    _zy: tuple | None = field(default=None, repr=False)

    @property
    def d(self):
        return self.H.shape[-1]

    @property
    def zy(self):
        if self._zy is None:
            self._zy = solve_zy_batch(self.G, self.dt)
        return self._zy


def path_functionals(e: WeightedEnsemble, model: IntensityModel) -> PathFunctionals:
    sc = e.scenario
    grid = sc.grid
    d = sc.d
    if model.d != d:
        raise ValueError("model and ensemble have different state counts")
    states = e.states()
    H = (states[:, :, None] == np.arange(d)).astype(float)
    occ = occupation(e.x0, e.times, e.dst, grid, d)
    counts = np.zeros((e.n, grid.K + 1, d, d))
    rows, cols = np.nonzero(np.isfinite(e.times))
    if rows.size:
        k = np.searchsorted(grid.nodes, e.times[rows, cols], side="left")
        np.add.at(counts, (rows, k, e.src[rows, cols], e.dst[rows, cols]), 1.0)
        counts = np.cumsum(counts, axis=1)
    return PathFunctionals(model.batch(e.factor), H, states, occ, counts, e.weights, e.factor, grid.dt)


# -- reports -------------------------------------------------------------------


@dataclass
class MartingaleTestReport:
    process: str
    rows: list[dict]
    n: int
    ess: float
    dictionary: list[str]
    threshold: float = Z_THRESHOLD

    @property
    def n_tests(self) -> int:
        return len(self.rows)

    @property
    def max_abs_z(self) -> float:
        return max((abs(r["z"]) for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_abs_z < self.threshold

    @property
    def min_adjusted_p(self) -> float:
        return min((r["p_adjusted"] for r in self.rows), default=1.0)

    def summary(self) -> dict:
        return {
            "process": self.process,
            "n": self.n,
            "ess": self.ess,
            "tests": self.n_tests,
            "max_abs_z": self.max_abs_z,
            "min_adjusted_p": self.min_adjusted_p,
            "threshold": self.threshold,
            "passed": self.passed,
        }

    def to_dict(self) -> dict:
        return {**self.summary(), "dictionary": self.dictionary, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["process", "component", "s", "t", "test_function", "mean", "se", "z", "p_adjusted"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({"process": self.process, **{c: r[c] for c in cols[1:]}})
        return buf.getvalue()


def _z(mean, se):
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, mean / np.where(se > 0, se, 1.0), np.where(mean == 0, 0.0, np.inf))
    return z


def _adjust(rows):
    m = len(rows)
    for r in rows:
        p = 2.0 * norm.sf(abs(r["z"]))
        r["p_adjusted"] = float(min(1.0, m * p))
    return rows


def _score(process, values_at, components, pairs, phi, names, w, ess, threshold):
    """Orthogonality statistics.

    ``values_at(s, t)`` returns ``(V_s, V_t)`` each ``(n, C)``;
    ``phi`` is ``(n, K+1, J)``.
    """
    n = len(w)
    rows = []
    for s, t in pairs:
        vs, vt = values_at(s, t)
        dv = vt - vs
        x = w[:, None, None] * phi[:, s, :, None] * dv[:, None, :]
        mean = x.mean(axis=0)
        se = x.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
        z = _z(mean, se)
        for j, name in enumerate(names):
            for c, comp in enumerate(components):
                rows.append({
                    "component": comp, "s": int(s), "t": int(t), "test_function": name,
                    "mean": float(mean[j, c]), "se": float(se[j, c]), "z": float(z[j, c]),
                })
    return MartingaleTestReport(process, _adjust(rows), n, ess, list(names), threshold)


def _setup(e, model, dictionary, pairs, pf, components=None):
    sc = e.scenario
    if pf is None:
        pf = path_functionals(e, model)
    if dictionary is None:
        dictionary = default_dictionary(sc.d)
    if pairs is None:
        per_pair = (components or sc.d) * len(dictionary.functions)
        pairs = default_pairs(sc.grid.K, max(1, min(5, MAX_TESTS // per_pair)))
    for s, t in pairs:
        if not 0 <= s < t <= sc.grid.K:
            raise ValueError(f"bad node pair {(s, t)}")
    phi = dictionary.evaluate(pf.factor, pf.states)
    return pf, dictionary, pairs, phi


def _compensated_drift(pf: PathFunctionals) -> np.ndarray:
    """``int_0^t Lambda_u^T H_u du`` at every node: ``(n, K+1, d)``."""
    inc = np.einsum("nkx,nkxy->nky", pf.occ, pf.G)
    out = np.zeros((inc.shape[0], inc.shape[1] + 1, inc.shape[2]))
    out[:, 1:] = np.cumsum(inc, axis=1)
    return out


def residual_M(e, model, dictionary=None, pairs=None, threshold=Z_THRESHOLD, pf=None):
    """``M_t = H_t - int_0^t Lambda_u^T H_u du``, one component per state."""
    pf, dictionary, pairs, phi = _setup(e, model, dictionary, pairs, pf)
    M = pf.H - _compensated_drift(pf)
    comps = [f"M{x + 1}" for x in range(pf.d)]
    return _score("M", lambda s, t: (M[:, s], M[:, t]), comps, pairs, phi,
                  dictionary.names, pf.weights, effective_sample_size(pf.weights), threshold)


def residual_K(e, model, x=None, y=None, dictionary=None, pairs=None, threshold=Z_THRESHOLD, pf=None):
    """``K^{xy}_t = H^{xy}_t - int_0^t H^x_u lambda^{xy}_u du``.

    With ``x`` and ``y`` given (labels) only that pair is tested; by
    default every ordered pair ``x != y`` is.
    """
    d = e.scenario.d
    if (x is None) != (y is None):
        raise ValueError("give both x and y, or neither")
    if x is not None:
        if x == y:
            raise ValueError("K^{xy} needs x != y")
        which = [(x - 1, y - 1)]
    else:
        which = [(a, b) for a in range(d) for b in range(d) if a != b]
    pf, dictionary, pairs, phi = _setup(e, model, dictionary, pairs, pf, len(which))
    rates = np.einsum("nka,nkab->nkab", pf.occ, pf.G)
    comp = np.zeros_like(pf.counts)
    comp[:, 1:] = np.cumsum(rates, axis=1)
    Kp = pf.counts - comp
    sel = np.stack([Kp[:, :, a, b] for a, b in which], axis=-1)
    comps = [f"K{a + 1}{b + 1}" for a, b in which]
    return _score("K", lambda s, t: (sel[:, s], sel[:, t]), comps, pairs, phi,
                  dictionary.names, pf.weights, effective_sample_size(pf.weights), threshold)


def residual_L(e, model, dictionary=None, pairs=None, threshold=Z_THRESHOLD, pf=None):
    """``L_t = Z_t^T H_t`` with ``Z`` solved on each path's factor."""
    pf, dictionary, pairs, phi = _setup(e, model, dictionary, pairs, pf)
    Z, _ = pf.zy
    L = np.einsum("nkab,nka->nkb", Z, pf.H)
    comps = [f"L{x + 1}" for x in range(pf.d)]
    return _score("L", lambda s, t: (L[:, s], L[:, t]), comps, pairs, phi,
                  dictionary.names, pf.weights, effective_sample_size(pf.weights), threshold)


def residual_N(e, model, t=None, dictionary=None, pairs=None, threshold=Z_THRESHOLD, pf=None):
    """``N^t_s = P(s,t)^T H_s`` as a process in ``s <= t`` (``t`` a node index)."""
    sc = e.scenario
    K = sc.grid.K
    t_node = K if t is None else int(t)
    if pairs is None:
        pairs = [(a, b) for a, b in default_pairs(K) if b <= t_node]
    if any(b > t_node for _, b in pairs):
        raise ValueError("N^t pairs must end at or before t")
    pf, dictionary, pairs, phi = _setup(e, model, dictionary, pairs, pf)
    Z, Y = pf.zy
    P = Z @ Y[:, t_node][:, None]  # P(s, t) for every s
    P[:, t_node] = np.eye(pf.d)
    N = np.einsum("nsxy,nsx->nsy", P, pf.H)
    comps = [f"N{y + 1}" for y in range(pf.d)]
    return _score(f"N^{t_node}", lambda s, u: (N[:, s], N[:, u]), comps, pairs, phi,
                  dictionary.names, pf.weights, effective_sample_size(pf.weights), threshold)


RESIDUALS = {"M": residual_M, "K": residual_K, "L": residual_L, "N": residual_N}


# -- conditional Markov property ---------------------------------------------


@dataclass
class CMCTestReport:
    t: int
    t1: int
    past: int | None
    rows: list[dict]
    empty: list[dict]
    n: int
    ess: float
    threshold: float = Z_THRESHOLD

    @property
    def max_abs_z(self) -> float:
        return max((abs(r["z"]) for r in self.rows), default=0.0)

    @property
    def max_abs_diff(self) -> float:
        return max((abs(r["diff"]) for r in self.rows), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_abs_z < self.threshold

    def summary(self) -> dict:
        return {
            "process": "CMC" if self.past is None else f"CMC|X_{self.past}",
            "t": self.t, "t1": self.t1, "n": self.n, "ess": self.ess,
            "cells": len(self.rows), "empty_cells": len(self.empty),
            "max_abs_z": self.max_abs_z, "max_abs_diff": self.max_abs_diff,
            "threshold": self.threshold, "passed": self.passed,
        }

    def to_dict(self) -> dict:
        return {**self.summary(), "rows": self.rows, "empty": self.empty}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["bucket", "x", "past", "y", "count", "empirical", "predicted", "diff", "se", "z"]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({c: r.get(c) for c in cols})
        return buf.getvalue()


def factor_buckets(values: np.ndarray, buckets: int) -> np.ndarray:
    edges = np.unique(np.quantile(values, np.linspace(0, 1, buckets + 1)[1:-1]))
    return np.searchsorted(edges, values, side="right")


def cmc_conditional_test(e, model, t=None, t1=None, targets=None, buckets=4, past=None,
                         threshold=Z_THRESHOLD, pf=None) -> CMCTestReport:
    """Compare ``P(X_{t1} = y | bucket(f_t), X_t = x)`` with the field.

    Cells are (factor bucket by quantiles of ``f_t``, ``X_t = x``, target
    ``y``), optionally refined by ``X_past`` at an earlier node.  Per path
    ``D = 1{X_{t1} = y} - p_{xy}(t, t1)``; the cell statistic is the
    weighted mean of ``D`` with a ratio-estimator standard error.
    """
    sc = e.scenario
    K = sc.grid.K
    t = K // 2 if t is None else int(t)
    t1 = K if t1 is None else int(t1)
    if not 0 <= t < t1 <= K:
        raise ValueError("need node indices 0 <= t < t1 <= K")
    if past is not None and not 0 <= past < t:
        raise ValueError("past node must precede t")
    if pf is None:
        pf = path_functionals(e, model)
    d = pf.d
    targets = list(range(1, d + 1)) if targets is None else list(targets)
    Z, Y = pf.zy
    P = Z[:, t] @ Y[:, t1]
    xt = pf.states[:, t]
    xt1 = pf.states[:, t1]
    b = factor_buckets(pf.factor[:, t], buckets)
    w = pf.weights
    pasts = [None] if past is None else list(range(d))
    rows, empty = [], []
    for bk in range(int(b.max()) + 1):
        for x in range(d):
            for xp in pasts:
                cell = (b == bk) & (xt == x)
                if xp is not None:
                    cell &= pf.states[:, past] == xp
                wc = w[cell]
                sw = wc.sum()
                for y in targets:
                    key = {"bucket": bk, "x": x + 1, "past": None if xp is None else xp + 1, "y": y}
                    if sw <= 0:
                        empty.append({**key, "count": int(cell.sum())})
                        continue
                    ind = (xt1[cell] == y - 1).astype(float)
                    pred = P[cell, x, y - 1]
                    D = ind - pred
                    dbar = (wc * D).sum() / sw
                    se = np.sqrt((wc ** 2 * (D - dbar) ** 2).sum()) / sw
                    z = float(_z(np.asarray(dbar), np.asarray(se)))
                    rows.append({
                        **key, "count": int(cell.sum()),
                        "empirical": float((wc * ind).sum() / sw),
                        "predicted": float((wc * pred).sum() / sw),
                        "diff": float(dbar), "se": float(se), "z": z,
                    })
    return CMCTestReport(t, t1, past, rows, empty, e.n, effective_sample_size(w), threshold)


# -- equivalence and common jumps -----------------------------------------------


@dataclass
class EquivalenceReport:
    max_abs_integral: float
    max_abs_integral_all: float
    paths_nonzero: int
    positive_weight_paths: int
    residual_M: MartingaleTestReport | None

    @property
    def equivalent(self) -> bool:
        return self.max_abs_integral == 0.0

    def to_dict(self) -> dict:
        return {
            "max_abs_integral": self.max_abs_integral,
            "max_abs_integral_all_paths": self.max_abs_integral_all,
            "paths_nonzero": self.paths_nonzero,
            "positive_weight_paths": self.positive_weight_paths,
            "equivalent": self.equivalent,
            "residual_M": None if self.residual_M is None else self.residual_M.summary(),
        }


def equivalence_check(model, model_hat, e, tol=0.0, dictionary=None, pairs=None) -> EquivalenceReport:
    """``int_0^T (Lambda_u - Lambda_hat_u)^T H_u du`` per path.

    The maximum is taken over paths of positive weight, which carry the
    target measure.  When it vanishes, ``residual_M`` is re-scored under
    ``model_hat``.
    """
    pf = path_functionals(e, model)
    G_hat = model_hat.batch(e.factor)
    diff = np.einsum("nkx,nkxy->ny", pf.occ, pf.G - G_hat)
    per_path = np.abs(diff).max(axis=1)
    live = pf.weights > 0
    m = float(per_path[live].max(initial=0.0))
    rep = None
    if m <= tol:
        pf_hat = PathFunctionals(G_hat, pf.H, pf.states, pf.occ, pf.counts, pf.weights, pf.factor, pf.dt)
        rep = residual_M(e, model_hat, dictionary, pairs, pf=pf_hat)
    return EquivalenceReport(m, float(per_path.max(initial=0.0)), int((per_path[live] > tol).sum()),
                             int(live.sum()), rep)


def common_jump_scan(e: WeightedEnsemble) -> int:
    """Number of chain jump times that coincide exactly with a factor jump time."""
    fj = e.factor_jumps
    if fj.size == 0 or e.times.size == 0:
        return 0
    hit = e.times[:, :, None] == fj[:, None, :]
    return int((hit & np.isfinite(e.times)[:, :, None]).sum())
