"""Reference-measure construction, Girsanov weights, and the direct sampler.

Randomness is counter based: path ``i`` of a run with base seed ``s``
draws all of its uniforms from ``Philox(key=s, counter=[0, 0, 0, i])``.
A path can therefore be regenerated on its own, and an ensemble does
not depend on how the paths were split across workers.

Per-path draw layout (uniforms on [0, 1)):

    [ factor driver draws | initial state (1) | chain: 2 * budget ]

The chain block holds one waiting-time uniform and one destination
uniform per event, interleaved.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .core import (
    ChainPath,
    FactorPath,
    IntensityModel,
    TimeGrid,
    as_generator,
    evaluate_intensity,
)


class EventBudgetError(RuntimeError):
    """A path used every pre-drawn event slot; the budget was too small."""


def path_generator(seed: int, path: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, 0, int(path)]))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return path_generator(seed, 0)


def _draw_range(seed: int, start: int, stop: int, m: int) -> np.ndarray:
    out = np.empty((stop - start, m))
    for i in range(start, stop):
        out[i - start] = path_generator(seed, i).random(m)
    return out


def worker_count() -> int:
    env = os.environ.get("CMC_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def draw_blocks(seed: int, n: int, m: int, workers: int | None = None) -> np.ndarray:
    """Uniform blocks ``(n, m)``; row ``i`` depends only on ``(seed, i)``."""
    workers = worker_count() if workers is None else workers
    if workers <= 1 or n < 2000:
        return _draw_range(seed, 0, n, m)
    edges = np.linspace(0, n, workers + 1).astype(int)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(_draw_range, [seed] * workers, edges[:-1], edges[1:], [m] * workers)
        return np.concatenate(list(parts), axis=0)


def _open_unit(u):
    # map [0, 1) to (0, 1] so logs and inverse normals stay finite
    return 1.0 - np.asarray(u)


def event_budget(rate_bound: float, T: float) -> int:
    mean = max(rate_bound, 0.0) * T
    return int(math.ceil(mean + 10.0 * math.sqrt(mean) + 10.0))


# -- factor drivers ----------------------------------------------------------


@dataclass(frozen=True)
class ConstantDriver:
    value: float = 0.0

    def n_draws(self, grid: TimeGrid) -> int:
        return 0

    def build(self, u: np.ndarray, grid: TimeGrid):
        n = u.shape[0]
        return np.full((n, grid.K + 1), float(self.value)), np.empty((n, 0))


@dataclass(frozen=True)
class BrownianDriver:
    """``f_0 = x0 + x0_sd * N(0,1)``, then independent ``N(0, sigma^2 dt)`` steps."""

    x0: float = 0.0
    x0_sd: float = 0.0
    sigma: float = 1.0

    def n_draws(self, grid):
        return grid.K + 1

    def build(self, u, grid):
        z = ndtri(_open_unit(u))
        f0 = self.x0 + self.x0_sd * z[:, :1]
        steps = self.sigma * math.sqrt(grid.dt) * z[:, 1:]
        values = np.concatenate([f0, f0 + np.cumsum(steps, axis=1)], axis=1)
        return values, np.empty((u.shape[0], 0))


@dataclass(frozen=True)
class FactorChainDriver:
    """Two-level factor toggling at exponential times of rate ``rate``.

    The initial level is chosen uniformly.  Jump times are reported so
    the common-jump scan can compare them with chain jumps.
    """

    levels: tuple[float, float] = (-1.0, 1.0)
    rate: float = 1.0

    def budget(self, grid):
        return event_budget(self.rate, grid.T)

    def n_draws(self, grid):
        return 1 + self.budget(grid)

    def build(self, u, grid):
        J = self.budget(grid)
        level0 = (u[:, 0] >= 0.5).astype(int)
        if self.rate > 0:
            gaps = -np.log(_open_unit(u[:, 1:])) / self.rate
            times = np.cumsum(gaps, axis=1)
        else:
            times = np.full((u.shape[0], J), np.inf)
        if np.any(times[:, -1] <= grid.T):
            raise EventBudgetError("factor chain exhausted its event budget")
        times = np.where(times <= grid.T, times, np.nan)
        counts = (times[:, :, None] <= grid.nodes[None, None, :]).sum(axis=1)
        level = (level0[:, None] + counts) % 2
        values = np.asarray(self.levels, dtype=float)[level]
        width = max(1, int(np.max(np.sum(~np.isnan(times), axis=1), initial=0)))
        return values, times[:, :width]


def driver_from_spec(spec: dict):
    spec = dict(spec)
    kind = spec.pop("driver", None)
    if kind == "constant":
        return ConstantDriver(float(spec.get("value", 0.0)))
    if kind == "brownian":
        return BrownianDriver(
            x0=float(spec.get("x0", 0.0)),
            x0_sd=float(spec.get("x0_sd", 0.0)),
            sigma=float(spec.get("sigma", 1.0)),
        )
    if kind == "factor_chain":
        levels = tuple(float(v) for v in spec.get("levels", (-1.0, 1.0)))
        if len(levels) != 2:
            raise ValueError("factor_chain driver takes exactly two levels")
        return FactorChainDriver(levels=levels, rate=float(spec.get("rate", 1.0)))
    raise ValueError(f"unknown factor driver {kind!r}")


def sample_factor(driver, grid: TimeGrid, seed) -> FactorPath:
    """One factor path; a pure function of ``(driver, grid, seed)``."""
    u = _as_rng(seed).random(driver.n_draws(grid))[None, :]
    values, jumps = driver.build(u, grid)
    j = jumps[0]
    return FactorPath(grid, values[0], j[~np.isnan(j)])


# -- initial laws ------------------------------------------------------------


@dataclass(frozen=True)
class ConstantLaw:
    probs: tuple[float, ...]

    def __post_init__(self):
        _check_probs(self.probs)

    @property
    def d(self):
        return len(self.probs)

    def probabilities(self, f0) -> np.ndarray:
        f0 = np.asarray(f0, dtype=float)
        return np.broadcast_to(np.asarray(self.probs), f0.shape + (self.d,))


@dataclass(frozen=True)
class FactorSignLaw:
    """``mu = positive`` when ``f_0 > 0`` and ``negative`` otherwise."""

    positive: tuple[float, ...]
    negative: tuple[float, ...]

    def __post_init__(self):
        _check_probs(self.positive)
        _check_probs(self.negative)
        if len(self.positive) != len(self.negative):
            raise ValueError("initial law branches differ in length")

    @property
    def d(self):
        return len(self.positive)

    def probabilities(self, f0):
        f0 = np.asarray(f0, dtype=float)
        pos = np.asarray(self.positive)
        neg = np.asarray(self.negative)
        return np.where((f0 > 0)[..., None], pos, neg)


def _check_probs(p):
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"not a probability vector: {p.tolist()}")


def law_from_spec(spec: dict):
    kind = spec.get("law")
    if kind == "constant":
        return ConstantLaw(tuple(float(v) for v in spec["probs"]))
    if kind == "factor_sign":
        return FactorSignLaw(
            tuple(float(v) for v in spec["positive"]),
            tuple(float(v) for v in spec["negative"]),
        )
    raise ValueError(f"unknown initial law {kind!r}")


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cum = np.cumsum(probs, axis=-1)
    idx = (cum <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def sample_initial(law, f: FactorPath, seed) -> int:
    """Initial state label drawn from ``mu(f_0)``."""
    u = _as_rng(seed).random(1)
    return int(_categorical(law.probabilities(f.values[0])[None, :], u)[0]) + 1


# -- event engine ------------------------------------------------------------


def simulate_events(G, x0, grid: TimeGrid, u_chain):
    """Exact event simulation under piecewise-constant generators.

    ``G`` has shape ``(n, K, d, d)`` (broadcast views are fine), ``x0`` is
    0-based, ``u_chain`` is ``(n, 2B)``.  Waiting times invert the
    integrated exit rate ``int -g^{ss}``; the destination is drawn with
    probabilities ``g^{sy} / -g^{ss}`` of the interval where the jump
    lands.  Returns ``times`` (inf padded) and 0-based ``src``/``dst``
    (-1 padded), each ``(n, B)``.
    """
    n = len(x0)
    B = u_chain.shape[1] // 2
    nodes = grid.nodes
    times = np.full((n, B), np.inf)
    src = np.full((n, B), -1, dtype=np.int64)
    dst = np.full((n, B), -1, dtype=np.int64)
    state = np.asarray(x0, dtype=np.int64).copy()
    clock = np.zeros(n)
    alive = np.arange(n)
    d = G.shape[-1]
    for j in range(B):
        if alive.size == 0:
            break
        if j == B - 1:
            raise EventBudgetError(f"{alive.size} path(s) reached the event budget {B}")
        s = state[alive]
        tau = clock[alive]
        E = -np.log(_open_unit(u_chain[alive, 2 * j]))
        found = np.zeros(alive.size, dtype=bool)
        t_jump = np.full(alive.size, np.inf)
        k_jump = np.zeros(alive.size, dtype=np.int64)
        for k in range(grid.K):
            start = np.maximum(tau, nodes[k])
            span = nodes[k + 1] - start
            live = (~found) & (span > 0)
            if not live.any():
                continue
            q = -G[alive, k, s, s]
            hazard = q * np.where(live, span, 0.0)
            hit = live & (q > 0) & (E <= hazard)
            with np.errstate(divide="ignore", invalid="ignore"):
                t_jump = np.where(hit, start + E / q, t_jump)
            k_jump[hit] = k
            found |= hit
            E = np.where(live & ~hit, E - hazard, E)
        if not found.any():
            break
        idx = alive[found]
        s_f = s[found]
        rows = np.array(G[idx, k_jump[found], s_f], dtype=float)
        rows[np.arange(idx.size), s_f] = 0.0
        q = rows.sum(axis=1)
        y = _categorical(rows / q[:, None], u_chain[idx, 2 * j + 1])
        bad = y == s_f
        if bad.any():
            y[bad] = d - 1 - np.argmax(rows[bad][:, ::-1] > 0, axis=1)
        times[idx, j] = np.minimum(t_jump[found], grid.T)
        src[idx, j] = s_f
        dst[idx, j] = y
        state[idx] = y
        clock[idx] = t_jump[found]
        alive = idx
    return times, src, dst


def states_at_nodes(x0, times, dst, grid: TimeGrid) -> np.ndarray:
    """0-based state at every node, cadlag: ``(n, K+1)``."""
    counts = (times[:, :, None] <= grid.nodes[None, None, :]).sum(axis=1)
    padded = np.concatenate([np.asarray(x0)[:, None], dst], axis=1)
    return np.take_along_axis(padded, counts, axis=1)


def occupation(x0, times, dst, grid: TimeGrid, d: int) -> np.ndarray:
    """Time spent in each state within each grid interval: ``(n, K, d)``."""
    n = len(x0)
    seg_state = np.concatenate([np.asarray(x0)[:, None], dst], axis=1)
    seg_start = np.concatenate([np.zeros((n, 1)), times], axis=1)
    seg_end = np.concatenate([times, np.full((n, 1), np.inf)], axis=1)
    seg_start = np.minimum(seg_start, grid.T)
    seg_end = np.minimum(seg_end, grid.T)
    nodes = grid.nodes
    occ = np.zeros((n, grid.K, d))
    for k in range(grid.K):
        overlap = np.clip(np.minimum(seg_end, nodes[k + 1]) - np.maximum(seg_start, nodes[k]), 0.0, None)
        for x in range(d):
            occ[:, k, x] = np.where(seg_state == x, overlap, 0.0).sum(axis=1)
    return occ


def jump_interval(times, grid: TimeGrid) -> np.ndarray:
    """Interval whose generator is the left limit at each jump time."""
    k = np.searchsorted(grid.nodes, times, side="left") - 1
    return np.clip(k, 0, grid.K - 1)


def log_density(G, A, x0, times, src, dst, grid: TimeGrid) -> np.ndarray:
    """``log eta`` at every node, ``(n, K+1)``.

    Exposure ``sum_x H^x (lambda^{xx} - a^{xx})`` is integrated exactly over
    the constant pieces; each jump ``x -> y`` contributes
    ``log(lambda^{xy}_{u-} / a^{xy})`` from the first node at or after it.
    """
    n = len(x0)
    d = A.shape[0]
    occ = occupation(x0, times, dst, grid, d)
    diag_gap = np.diagonal(G, axis1=-2, axis2=-1) - np.diag(A)
    exposure = (occ * diag_gap).sum(axis=-1)
    logeta = np.zeros((n, grid.K + 1))
    logeta[:, 1:] = np.cumsum(exposure, axis=1)
    valid = np.isfinite(times)
    if valid.any():
        rows, cols = np.nonzero(valid)
        k = jump_interval(times[rows, cols], grid)
        a, b = src[rows, cols], dst[rows, cols]
        with np.errstate(divide="ignore"):
            term = np.log(G[rows, k, a, b] / A[a, b])
        jumps = np.zeros((n, grid.K + 1))
        np.add.at(jumps, (rows, k + 1), term)
        with np.errstate(invalid="ignore"):
            logeta += np.cumsum(jumps, axis=1)
    return logeta


# -- public single-path operations -------------------------------------------


def _check_reference(A) -> np.ndarray:
    A = as_generator(A)
    off = ~np.eye(A.shape[0], dtype=bool)
    if np.any(A[off] <= 0):
        raise ValueError("reference rates must be strictly positive off the diagonal")
    return A


def _chain_path(x0, times, src, dst, T) -> ChainPath:
    keep = np.isfinite(times)
    jumps = tuple((float(u), int(a) + 1, int(b) + 1) for u, a, b in zip(times[keep], src[keep], dst[keep]))
    return ChainPath(int(x0) + 1, jumps, T)


def simulate_reference_chain(rates, x0: int, grid: TimeGrid, seed) -> ChainPath:
    """Chain driven by independent Poisson clocks with rates ``a^{xy}``."""
    A = _check_reference(rates)
    B = event_budget(float(np.max(-np.diag(A))), grid.T)
    u = _as_rng(seed).random(2 * B)[None, :]
    G = np.broadcast_to(A, (1, grid.K) + A.shape)
    times, src, dst = simulate_events(G, np.array([x0 - 1]), grid, u)
    return _chain_path(x0 - 1, times[0], src[0], dst[0], grid.T)


def intensity_path(model: IntensityModel, f: FactorPath) -> np.ndarray:
    """Generators on each grid interval, one adapted evaluation per node."""
    return np.stack([evaluate_intensity(model, f, t) for t in f.grid.nodes[:-1]])


def radon_nikodym_weight(p: ChainPath, f: FactorPath, model: IntensityModel, rates, grid: TimeGrid):
    """``(eta_T, eta at every node)`` for a single path."""
    A = _check_reference(rates)
    G = intensity_path(model, f)
    if np.any(G[:, ~np.eye(A.shape[0], dtype=bool)] < 0):
        raise ValueError("model produced a negative intensity")
    B = max(1, len(p.jumps))
    times = np.full((1, B), np.inf)
    src = np.full((1, B), -1)
    dst = np.full((1, B), -1)
    for j, (u, a, b) in enumerate(p.jumps):
        times[0, j], src[0, j], dst[0, j] = u, a - 1, b - 1
    eta = np.exp(log_density(G[None], A, np.array([p.x0 - 1]), times, src, dst, grid))[0]
    return float(eta[-1]), eta


def simulate_direct_dsmc(model: IntensityModel, law, f: FactorPath, grid: TimeGrid, seed) -> ChainPath:
    """Chain with generator ``Lambda_t(f)`` given the factor path."""
    G = intensity_path(model, f)
    rng = _as_rng(seed)
    B = event_budget((model.d - 1) * model.bound(), grid.T)
    u = rng.random(1 + 2 * B)
    x0 = int(_categorical(law.probabilities(f.values[0])[None, :], u[:1])[0])
    times, src, dst = simulate_events(G[None], np.array([x0]), grid, u[None, 1:])
    return _chain_path(x0, times[0], src[0], dst[0], grid.T)


# -- ensembles ---------------------------------------------------------------


@dataclass
class WeightedEnsemble:
    """Paths with Radon-Nikodym weights; arrays are indexed by path.

    ``x0``, ``src`` and ``dst`` are 0-based.  ``eta[:, k]`` is the density
    at node ``k``; the weight of a path is ``eta[:, -1]``.
    """

    scenario: "Scenario"
    seed: int
    sampler: str
    factor: np.ndarray
    factor_jumps: np.ndarray
    x0: np.ndarray
    times: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    eta: np.ndarray

    @property
    def n(self) -> int:
        return len(self.x0)

    @property
    def weights(self) -> np.ndarray:
        return self.eta[:, -1]

    def path(self, i: int) -> tuple[FactorPath, ChainPath, float]:
        grid = self.scenario.grid
        j = self.factor_jumps[i]
        f = FactorPath(grid, self.factor[i], j[~np.isnan(j)])
        c = _chain_path(self.x0[i], self.times[i], self.src[i], self.dst[i], grid.T)
        return f, c, float(self.weights[i])

    def states(self) -> np.ndarray:
        return states_at_nodes(self.x0, self.times, self.dst, self.scenario.grid)


def chain_budget(scenario, sampler: str) -> int:
    if sampler == "reference":
        bound = float(np.max(-np.diag(scenario.reference_rates)))
    else:
        bound = (scenario.d - 1) * scenario.lambda_max
    return event_budget(bound, scenario.grid.T)


def _layout(scenario, sampler):
    m_f = scenario.driver.n_draws(scenario.grid)
    B = chain_budget(scenario, sampler)
    return m_f, m_f + 1 + 2 * B


def _assemble(scenario, seed, sampler, u) -> WeightedEnsemble:
    grid = scenario.grid
    m_f, _ = _layout(scenario, sampler)
    factor, fjumps = scenario.driver.build(u[:, :m_f], grid)
    mu = scenario.initial_law.probabilities(factor[:, 0])
    x0 = _categorical(mu, u[:, m_f])
    G = scenario.model.batch(factor)
    A = scenario.reference_rates
    u_chain = u[:, m_f + 1:]
    if sampler == "reference":
        GA = np.broadcast_to(A, G.shape)
        times, src, dst = simulate_events(GA, x0, grid, u_chain)
        eta = np.exp(log_density(G, A, x0, times, src, dst, grid))
    elif sampler == "direct":
        times, src, dst = simulate_events(G, x0, grid, u_chain)
        eta = np.ones((len(x0), grid.K + 1))
    else:
        raise ValueError(f"unknown sampler {sampler!r}")
    width = max(1, int(np.max(np.isfinite(times).sum(axis=1), initial=0)))
    return WeightedEnsemble(
        scenario, int(seed), sampler, factor, fjumps, x0,
        times[:, :width], src[:, :width], dst[:, :width], eta,
    )


def build_weighted_ensemble(scenario, n: int, seed: int, workers: int | None = None) -> WeightedEnsemble:
    """``n`` reference-measure paths reweighted to the target measure."""
    _, m = _layout(scenario, "reference")
    u = draw_blocks(seed, n, m, workers)
    return _assemble(scenario, seed, "reference", u)


def sample_direct_ensemble(scenario, n: int, seed: int, workers: int | None = None) -> WeightedEnsemble:
    """``n`` paths from the doubly stochastic sampler; all weights 1."""
    _, m = _layout(scenario, "direct")
    u = draw_blocks(seed, n, m, workers)
    return _assemble(scenario, seed, "direct", u)


def regenerate_path(scenario, seed: int, index: int, sampler: str = "reference"):
    """Path ``index`` of an ensemble rebuilt in isolation."""
    _, m = _layout(scenario, sampler)
    u = path_generator(seed, index).random(m)[None, :]
    return _assemble(scenario, seed, sampler, u).path(0)


def effective_sample_size(weights) -> float:
    if isinstance(weights, WeightedEnsemble):
        weights = weights.weights
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        raise ValueError("empty ensemble")
    s2 = np.sum(w * w)
    return float(np.sum(w) ** 2 / s2) if s2 > 0 else 0.0
