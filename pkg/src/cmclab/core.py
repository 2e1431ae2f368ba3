"""State space, grids, factor and chain paths, and intensity models.

States are labelled ``1..d`` in every public object (``ChainPath``,
``indicators``, ``transition_count``).  Dense arrays used for batch work
(ensembles, diagnostics) hold 0-based state indices; the conversion is
always ``label = index + 1``.

Intensities are piecewise constant on the grid: the generator in force
on ``[t_k, t_{k+1})`` is computed from the factor values at nodes
``0..k`` only.  The left limit at ``t_k`` is therefore the value on the
previous interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ROW_SUM_TOL = 1e-12


class GeneratorError(ValueError):
    """A matrix that should be a generator violates the constraints."""


class AdaptednessError(RuntimeError):
    """An intensity evaluator tried to read factor values after ``t``."""


@dataclass(frozen=True)
class StateSpace:
    d: int

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 2:
            raise ValueError(f"state space needs d >= 2, got {self.d}")

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(range(1, self.d + 1))

    def check(self, x: int) -> int:
        if x not in self.labels:
            raise ValueError(f"state {x} not in 1..{self.d}")
        return x


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / K`` on ``[0, T]``."""

    T: float
    K: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon T must be positive")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError("K must be a positive integer")

    @property
    def dt(self) -> float:
        return self.T / self.K

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.K + 1)

    def interval(self, t: float) -> int:
        """Index ``k`` of the interval ``[t_k, t_{k+1})`` holding ``t``.

        ``t = T`` maps to ``K``, the last node.
        """
        if t < -1e-12 * self.T or t > self.T * (1 + 1e-12):
            raise ValueError(f"time {t} outside [0, {self.T}]")
        k = int(np.searchsorted(self.nodes, t + 1e-12 * self.T, side="right")) - 1
        return min(max(k, 0), self.K)

    def node_index(self, t: float) -> int:
        """Index of the node equal to ``t``; raises if ``t`` is not a node."""
        k = self.interval(t)
        if not math.isclose(self.nodes[k], t, rel_tol=1e-9, abs_tol=1e-12 * self.T):
            raise ValueError(f"time {t} is not a grid node")
        return k


@dataclass(frozen=True)
class FactorPath:
    """Scalar factor values at the grid nodes plus declared jump times."""

    grid: TimeGrid
    values: np.ndarray
    jump_times: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        jumps = np.array(self.jump_times, dtype=float).reshape(-1)
        if values.shape != (self.grid.K + 1,):
            raise ValueError("factor path needs one value per grid node")
        if jumps.size and (jumps.min() < 0 or jumps.max() > self.grid.T):
            raise ValueError("factor jump times must lie in [0, T]")
        values.flags.writeable = False
        jumps.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "jump_times", jumps)

    def history(self, k: int) -> np.ndarray:
        """Read-only copy of the values at nodes ``0..k``."""
        h = self.values[: k + 1].copy()
        h.flags.writeable = False
        return h


@dataclass(frozen=True)
class ChainPath:
    """Initial state and ordered jump records ``(time, from, to)``."""

    x0: int
    jumps: tuple[tuple[float, int, int], ...] = ()
    T: float = 1.0

    def __post_init__(self):
        jumps = tuple((float(u), int(a), int(b)) for u, a, b in self.jumps)
        prev_t, prev_x = 0.0, self.x0
        for u, a, b in jumps:
            if not prev_t < u <= self.T:
                raise ValueError("jump times must be strictly increasing in (0, T]")
            if a == b:
                raise ValueError("a jump must change state")
            if a != prev_x:
                raise ValueError(f"jump record from {a} does not chain from state {prev_x}")
            prev_t, prev_x = u, b
        object.__setattr__(self, "jumps", jumps)

    @property
    def jump_times(self) -> np.ndarray:
        return np.array([u for u, _, _ in self.jumps], dtype=float)

    def state_at(self, t: float) -> int:
        # cadlag: at a jump time the post-jump state is returned
        x = self.x0
        for u, _, b in self.jumps:
            if u <= t:
                x = b
            else:
                break
        return x

    def state_before(self, t: float) -> int:
        x = self.x0
        for u, _, b in self.jumps:
            if u < t:
                x = b
            else:
                break
        return x


def indicators(p: ChainPath, t: float, d: int) -> np.ndarray:
    """State indicator vector ``H_t`` of length ``d`` (exactly one entry is 1)."""
    if t < 0 or t > p.T:
        raise ValueError(f"time {t} outside [0, {p.T}]")
    h = np.zeros(d, dtype=int)
    h[p.state_at(t) - 1] = 1
    return h


def transition_count(p: ChainPath, x: int, y: int, t: float) -> int:
    """Number of jumps ``x -> y`` at times ``u <= t``."""
    if x == y:
        raise ValueError("transition_count needs x != y")
    return sum(1 for u, a, b in p.jumps if a == x and b == y and u <= t)


@dataclass
class GeneratorCheck:
    ok: bool
    violations: list[str]

    def __bool__(self):
        return self.ok


def validate_generator(G, tol: float = ROW_SUM_TOL) -> GeneratorCheck:
    """Check off-diagonals are nonnegative and rows sum to zero."""
    G = np.asarray(G, dtype=float)
    problems = []
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        return GeneratorCheck(False, [f"not a square matrix: shape {G.shape}"])
    d = G.shape[0]
    for x in range(d):
        for y in range(d):
            if x != y and not G[x, y] >= 0:
                problems.append(f"negative off-diagonal ({x + 1},{y + 1}) = {G[x, y]!r}")
        s = G[x].sum()
        if not abs(s) <= tol:
            problems.append(f"row {x + 1} sums to {s!r}")
    return GeneratorCheck(not problems, problems)


def check_generators(G: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    """Vectorised check on a stack ``(..., d, d)``; raises ``GeneratorError``."""
    G = np.asarray(G)
    d = G.shape[-1]
    off = ~np.eye(d, dtype=bool)
    if np.any(G[..., off] < 0) or not np.all(np.isfinite(G)):
        raise GeneratorError("negative or non-finite off-diagonal intensity")
    if np.any(np.abs(G.sum(axis=-1)) > tol):
        raise GeneratorError("generator rows do not sum to zero")


def as_generator(G) -> np.ndarray:
    G = np.array(G, dtype=float)
    check = validate_generator(G)
    if not check:
        raise GeneratorError("; ".join(check.violations))
    return G


def _fix_diagonal(G: np.ndarray) -> np.ndarray:
    d = G.shape[-1]
    idx = np.arange(d)
    G[..., idx, idx] = 0.0
    G[..., idx, idx] = -G.sum(axis=-1)
    return G


def _logistic(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- intensity models --------------------------------------------------------


class IntensityModel:
    """Adapted map from factor history to a generator matrix.

    Subclasses implement ``_from_feature`` on an array of causal features
    and ``bound``.  ``rates`` is the single-path contract: it receives
    only the factor values at nodes ``0..k``.  ``batch`` evaluates every
    grid interval of many paths at once.
    """

    d: int
    feature: str = "value"

    def bound(self) -> float:
        """Upper bound on every off-diagonal entry."""
        raise NotImplementedError

    def _from_feature(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _feature_last(self, history: np.ndarray) -> float:
        if self.feature == "value":
            return history[len(history) - 1]
        if self.feature == "running_max":
            return history.max()
        raise ValueError(f"unknown feature {self.feature!r}")

    def _feature_all(self, values: np.ndarray) -> np.ndarray:
        if self.feature == "value":
            return values
        if self.feature == "running_max":
            return np.maximum.accumulate(values, axis=-1)
        raise ValueError(f"unknown feature {self.feature!r}")

    def rates(self, history: np.ndarray) -> np.ndarray:
        return self._from_feature(np.asarray(self._feature_last(history)))

    def batch(self, values: np.ndarray) -> np.ndarray:
        """Generators on all intervals: ``values (n, K+1) -> (n, K, d, d)``."""
        z = self._feature_all(np.asarray(values, dtype=float))[..., :-1]
        G = self._from_feature(z)
        check_generators(G)
        return G


@dataclass
class ConstantIntensity(IntensityModel):
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = as_generator(self.matrix)
        self.d = self.matrix.shape[0]

    def bound(self):
        off = ~np.eye(self.d, dtype=bool)
        return float(self.matrix[off].max())

    def _from_feature(self, z):
        z = np.asarray(z)
        return np.broadcast_to(self.matrix, z.shape + self.matrix.shape).copy()


@dataclass
class MixtureIntensity(IntensityModel):
    """``(1 - s) * low + s * high`` with ``s`` a link of the factor feature.

    ``link="logistic"``: ``s = 1 / (1 + exp(-slope * (z - threshold)))``;
    ``link="step"``: ``s = 1{z > threshold}``.
    """

    low: np.ndarray
    high: np.ndarray
    link: str = "logistic"
    slope: float = 1.0
    threshold: float = 0.0
    feature: str = "value"

    def __post_init__(self):
        self.low = as_generator(self.low)
        self.high = as_generator(self.high)
        if self.low.shape != self.high.shape:
            raise ValueError("low and high generators differ in size")
        if self.link not in ("logistic", "step"):
            raise ValueError(f"unknown link {self.link!r}")
        self.d = self.low.shape[0]

    def bound(self):
        off = ~np.eye(self.d, dtype=bool)
        return float(max(self.low[off].max(), self.high[off].max()))

    def weight(self, z):
        z = np.asarray(z, dtype=float) - self.threshold
        if self.link == "step":
            return (z > 0).astype(float)
        return _logistic(self.slope * z)

    def _from_feature(self, z):
        s = self.weight(z)[..., None, None]
        return _fix_diagonal((1.0 - s) * self.low + s * self.high)


@dataclass
class TimeChangedIntensity(IntensityModel):
    """Discrete chain run on a Cox clock: ``(P - I) * rate(z)``.

    ``rate(z) = base * (1 + amplitude * tanh(z))`` with ``amplitude < 1``.
    """

    jump_matrix: np.ndarray
    base: float = 1.0
    amplitude: float = 0.5
    feature: str = "value"

    def __post_init__(self):
        P = np.array(self.jump_matrix, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("jump matrix must be square")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1) > 1e-12):
            raise ValueError("jump matrix must be stochastic")
        if not (self.base >= 0 and 0 <= self.amplitude < 1):
            raise ValueError("need base >= 0 and 0 <= amplitude < 1")
        self.jump_matrix = P
        self.d = P.shape[0]

    def clock_rate(self, z):
        return self.base * (1.0 + self.amplitude * np.tanh(np.asarray(z, dtype=float)))

    def bound(self):
        off = ~np.eye(self.d, dtype=bool)
        return float(self.base * (1 + self.amplitude) * self.jump_matrix[off].max())

    def _from_feature(self, z):
        r = self.clock_rate(z)[..., None, None]
        return _fix_diagonal((self.jump_matrix - np.eye(self.d)) * r)


@dataclass
class ScaledIntensity(IntensityModel):
    """``scale * inner``; used for misspecification overrides like 2Λ."""

    inner: IntensityModel
    scale: float

    def __post_init__(self):
        if not self.scale >= 0:
            raise ValueError("scale must be nonnegative")
        self.d = self.inner.d
        self.feature = self.inner.feature

    def bound(self):
        return self.scale * self.inner.bound()

    def _from_feature(self, z):
        return self.scale * self.inner._from_feature(z)


@dataclass
class RowReplacedIntensity(IntensityModel):
    """``inner`` with row ``row`` (a state label) replaced by a fixed row."""

    inner: IntensityModel
    row: int
    new_row: np.ndarray

    def __post_init__(self):
        self.d = self.inner.d
        self.feature = self.inner.feature
        r = np.array(self.new_row, dtype=float)
        x = self.row - 1
        if r.shape != (self.d,) or abs(r.sum()) > ROW_SUM_TOL or np.any(np.delete(r, x) < 0):
            raise GeneratorError("replacement row is not a generator row")
        self.new_row = r

    def bound(self):
        return max(self.inner.bound(), float(np.delete(self.new_row, self.row - 1).max()))

    def _from_feature(self, z):
        G = np.array(self.inner._from_feature(z))
        G[..., self.row - 1, :] = self.new_row
        return G


def evaluate_intensity(model: IntensityModel, f: FactorPath, t: float) -> np.ndarray:
    """Generator in force at time ``t`` computed from ``f`` truncated at ``t``."""
    k = f.grid.interval(t)
    history = f.history(k)
    try:
        G = np.array(model.rates(history), dtype=float)
    except IndexError as exc:
        raise AdaptednessError(
            f"intensity evaluator read beyond node {k} (t={t})"
        ) from exc
    check = validate_generator(G)
    if not check:
        raise GeneratorError("model produced an invalid generator: " + "; ".join(check.violations))
    return G


def model_from_spec(spec: dict, d: int) -> IntensityModel:
    """Build an intensity model from its JSON description."""
    spec = dict(spec)
    kind = spec.pop("model", None)
    if kind == "constant":
        m = ConstantIntensity(spec["matrix"])
    elif kind == "mixture":
        m = MixtureIntensity(
            spec["low"], spec["high"],
            link=spec.get("link", "logistic"),
            slope=float(spec.get("slope", 1.0)),
            threshold=float(spec.get("threshold", 0.0)),
            feature=spec.get("feature", "value"),
        )
    elif kind == "time_changed":
        m = TimeChangedIntensity(
            spec["jump_matrix"],
            base=float(spec.get("base", 1.0)),
            amplitude=float(spec.get("amplitude", 0.5)),
            feature=spec.get("feature", "value"),
        )
    else:
        raise ValueError(f"unknown intensity model {kind!r}")
    if m.feature not in ("value", "running_max"):
        raise ValueError(f"unknown feature {m.feature!r}")
    if m.d != d:
        raise ValueError(f"intensity model has {m.d} states, scenario has {d}")
    return m
