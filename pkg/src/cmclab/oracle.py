"""Exact checks on enumerable discrete-time scenarios.

The factor is a sequence of fair bits ``b_0 .. b_{K-1}``; the information
at step ``k`` is ``F_k = sigma(b_0 .. b_k)`` and the step ``k -> k+1`` uses
the one-step matrix ``I + Lambda_k dt`` with ``Lambda_k`` read from bits up
to ``k``.  Every atom (bits, trajectory ``x_0 .. x_K``) is listed with its
exact probability, so conditional probabilities are finite sums.

Discrete scenario schema::

    {
      "kind": "discrete", "name": "...", "states": 2, "K": 3, "dt": 0.1,
      "intensity": {"table": "bit_switch", "reads": "current",
                    "generators": [G_bit0, G_bit1]},
      "reference_rates": [[...]],
      "initial_law": [...],
      "tamper": "step_reads_x0" | "mu_reads_future_bit"     # optional
    }

``reads`` chooses the bit feature: ``current`` (``b_k``), ``first``
(``b_0``) or ``average`` (mean of ``b_0 .. b_k``, interpolating the two
generators).  The tamper modes plant violations for negative controls.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass

import numpy as np

from .core import as_generator, check_generators
from .kolmogorov import expm

MAX_K = 8
MAX_D = 3
TAMPERS = ("step_reads_x0", "mu_reads_future_bit")


class OracleSizeError(ValueError):
    """Scenario exceeds the enumeration guards."""


@dataclass(frozen=True)
class DiscreteScenario:
    name: str
    d: int
    K: int
    dt: float
    generators: np.ndarray  # (2, d, d)
    reads: str
    reference_rates: np.ndarray
    initial_law: np.ndarray
    tamper: str | None = None

    def __post_init__(self):
        if self.K > MAX_K or self.d > MAX_D:
            raise OracleSizeError(f"oracle handles K <= {MAX_K} and d <= {MAX_D}, got K={self.K}, d={self.d}")
        if self.K < 1 or self.d < 2:
            raise ValueError("need K >= 1 and d >= 2")
        if self.reads not in ("current", "first", "average"):
            raise ValueError(f"unknown bit feature {self.reads!r}")
        if self.tamper is not None and self.tamper not in TAMPERS:
            raise ValueError(f"unknown tamper mode {self.tamper!r}")
        for G in list(self.generators) + [self.reference_rates]:
            check_generators(G)
            if np.max(-np.diag(G)) * self.dt > 1.0:
                raise ValueError("dt too large: one-step matrix I + G dt is not stochastic")
        mu = self.initial_law
        if mu.shape != (self.d,) or np.any(mu < 0) or abs(mu.sum() - 1) > 1e-12:
            raise ValueError("initial law is not a probability vector")

    def intensity(self, bits: np.ndarray) -> np.ndarray:
        """``Lambda_k`` for every bit sequence: ``(N, K) bits -> (N, K, d, d)``."""
        bits = np.asarray(bits, dtype=float)
        if self.reads == "current":
            s = bits
        elif self.reads == "first":
            s = np.repeat(bits[:, :1], self.K, axis=1)
        else:
            s = np.cumsum(bits, axis=1) / np.arange(1, self.K + 1)
        G0, G1 = self.generators
        return G0 + s[..., None, None] * (G1 - G0)

    def step_matrices(self, bits) -> np.ndarray:
        return np.eye(self.d) + self.intensity(bits) * self.dt

    def mu(self, bits) -> np.ndarray:
        """Initial law per bit sequence ``(N, d)``; constant unless tampered."""
        bits = np.asarray(bits)
        mu = np.broadcast_to(self.initial_law, (len(bits), self.d)).copy()
        if self.tamper == "mu_reads_future_bit":
            flip = bits[:, -1] == 1
            mu[flip] = mu[flip][:, ::-1]
        return mu


def discrete_from_dict(doc: dict) -> DiscreteScenario:
    if doc.get("kind") != "discrete":
        raise ValueError("expected a discrete scenario")
    d, K = int(doc["states"]), int(doc["K"])
    if K > MAX_K or d > MAX_D:
        raise OracleSizeError(f"oracle handles K <= {MAX_K} and d <= {MAX_D}, got K={K}, d={d}")
    spec = doc["intensity"]
    if spec.get("table") != "bit_switch":
        raise ValueError(f"unknown intensity table {spec.get('table')!r}")
    gens = np.stack([as_generator(g) for g in spec["generators"]])
    if gens.shape != (2, d, d):
        raise ValueError("bit_switch needs two d x d generators")
    return DiscreteScenario(
        doc.get("name", "unnamed"), d, K, float(doc["dt"]), gens, spec.get("reads", "current"),
        as_generator(doc["reference_rates"]), np.asarray(doc["initial_law"], dtype=float),
        doc.get("tamper"),
    )


def load_discrete(path) -> DiscreteScenario:
    with open(path) as fh:
        return discrete_from_dict(json.load(fh))


def constant_scenario(G, T, K, x0=1, name="constant") -> DiscreteScenario:
    """Bit-independent generator ``G`` on ``[0, T]`` with ``K`` steps, started at ``x0``."""
    G = as_generator(G)
    d = G.shape[0]
    mu = np.zeros(d)
    mu[x0 - 1] = 1.0
    A = np.ones((d, d))
    np.fill_diagonal(A, 1 - d)
    return DiscreteScenario(name, d, K, T / K, np.stack([G, G]), "current", A, mu)


# -- atoms -------------------------------------------------------------------


@dataclass
class AtomTable:
    """Atoms with exact probabilities; ``bits (N, K)``, ``path (N, K+1)`` 0-based."""

    scenario: DiscreteScenario
    measure: str
    bits: np.ndarray
    path: np.ndarray
    prob: np.ndarray

    @property
    def size(self) -> int:
        return len(self.prob)

    def code(self, bit_cols=(), state_cols=()) -> np.ndarray:
        """Mixed-radix integer key of the chosen bit and state columns."""
        key = np.zeros(self.size, dtype=np.int64)
        for c in bit_cols:
            key = key * 2 + self.bits[:, c]
        for c in state_cols:
            key = key * self.scenario.d + self.path[:, c]
        return key


def _all_bits(K):
    return np.array(list(itertools.product((0, 1), repeat=K)), dtype=np.int64).reshape(-1, K)


def enumerate_atoms(sc: DiscreteScenario, measure: str = "P", prune: bool = True) -> AtomTable:
    """Every (bits, trajectory) atom with its probability under ``P`` or ``Q``.

    ``P`` uses ``I + Lambda_k dt``; ``Q`` uses ``I + A dt`` independently of
    the bits.  Both use the same initial law.
    """
    if measure not in ("P", "Q"):
        raise ValueError("measure must be 'P' or 'Q'")
    K, d = sc.K, sc.d
    bits = _all_bits(K)
    nb = len(bits)
    trajs = np.array(list(itertools.product(range(d), repeat=K + 1)), dtype=np.int64)
    nt = len(trajs)
    B = np.repeat(bits, nt, axis=0)
    X = np.tile(trajs, (nb, 1))
    bit_idx = np.repeat(np.arange(nb), nt)
    prob = np.full(len(B), 0.5 ** K)
    prob *= sc.mu(bits)[bit_idx, X[:, 0]]
    if measure == "P":
        steps = sc.step_matrices(bits)  # (nb, K, d, d)
        for k in range(K):
            m = steps[bit_idx, k, X[:, k], X[:, k + 1]]
            if sc.tamper == "step_reads_x0" and k == 1:
                half = np.eye(d) + 0.5 * sc.intensity(bits)[:, k] * sc.dt
                m = np.where(X[:, 0] != 0, half[bit_idx, X[:, k], X[:, k + 1]], m)
            prob *= m
    else:
        R = np.eye(d) + sc.reference_rates * sc.dt
        for k in range(K):
            prob *= R[X[:, k], X[:, k + 1]]
    if prune:
        keep = prob > 0
        B, X, prob = B[keep], X[keep], prob[keep]
    return AtomTable(sc, measure, B, X, prob)


def _group_sum(key, values):
    uniq, inv = np.unique(key, return_inverse=True)
    return np.bincount(inv, weights=values, minlength=len(uniq))[inv]


def conditional_probability(table: AtomTable, event, partition) -> np.ndarray:
    """``P(event | cell)`` evaluated on every atom.

    ``event`` is a boolean mask over atoms (or a predicate of the table);
    ``partition`` is a ``(bit_cols, state_cols)`` pair naming the
    conditioning variables.  Cells of zero probability get ``nan``.
    """
    if callable(event):
        event = event(table)
    event = np.asarray(event)
    if event.shape != (table.size,) or event.dtype != bool:
        raise ValueError("event must be a boolean mask with one entry per atom")
    bit_cols, state_cols = partition
    key = table.code(bit_cols, state_cols)
    joint = _group_sum(key, table.prob * event)
    cell = _group_sum(key, table.prob)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(cell > 0, joint / cell, np.nan)


def _cond_on(table, bit_cols, state_cols, target_bits=(), target_states=()):
    """``P(targets take the atom's values | conditioning cell)`` per atom."""
    cond = table.code(bit_cols, state_cols)
    joint_key = cond * (2 ** len(target_bits) * table.scenario.d ** len(target_states)) + \
        table.code(target_bits, target_states)
    return _group_sum(joint_key, table.prob) / _group_sum(cond, table.prob)


def _bits_upto(sc, k):
    return tuple(range(min(k, sc.K - 1) + 1))


def field_products(sc: DiscreteScenario) -> np.ndarray:
    """``p~(j, k) = prod_{m=j}^{k-1} (I + Lambda_m dt)`` per bit sequence.

    Returns ``(2^K, K+1, K+1, d, d)`` indexed by the bits' binary code.
    """
    bits = _all_bits(sc.K)
    steps = sc.step_matrices(bits)
    nb, K, d = len(bits), sc.K, sc.d
    out = np.zeros((nb, K + 1, K + 1, d, d))
    for j in range(K + 1):
        acc = np.broadcast_to(np.eye(d), (nb, d, d)).copy()
        out[:, j, j] = acc
        for k in range(j, K):
            acc = acc @ steps[:, k]
            out[:, j, k + 1] = acc
    return out


def _bit_code(table):
    return table.code(tuple(range(table.scenario.K)))


# -- verifications -------------------------------------------------------------


def verify_cmc(table: AtomTable) -> float:
    """Max ``|P(future | F_k, X_0..X_k) - P(future | F_k, X_k)|`` over ``k`` and atoms."""
    sc = table.scenario
    worst = 0.0
    for k in range(sc.K):
        fb = _bits_upto(sc, k)
        future = tuple(range(k + 1, sc.K + 1))
        full = _cond_on(table, fb, tuple(range(k + 1)), (), future)
        markov = _cond_on(table, fb, (k,), (), future)
        worst = max(worst, float(np.abs(full - markov).max()))
    return worst


def verify_dsmc_and_tp(table: AtomTable) -> dict:
    """Two checks against the bit-measurable products ``p~``.

    ``dsmc``: ``P(X_k = y | all bits, X_0..X_j) = p~_{X_j y}(j, k)``.
    ``tp``: the quotient ``P(X_k = y | F_k, X_j = x)`` equals ``p~_{xy}(j, k)``
    wherever ``P(X_j = x | F_k) > 0``.
    """
    sc = table.scenario
    ptil = field_products(sc)
    bcode = _bit_code(table)
    all_bits = tuple(range(sc.K))
    dsmc = tp = 0.0
    for j in range(sc.K):
        for k in range(j + 1, sc.K + 1):
            expected = ptil[bcode, j, k, table.path[:, j], table.path[:, k]]
            got = _cond_on(table, all_bits, tuple(range(j + 1)), (), (k,))
            dsmc = max(dsmc, float(np.abs(got - expected).max()))
            quot = _cond_on(table, _bits_upto(sc, k), (j,), (), (k,))
            tp = max(tp, float(np.abs(quot - expected).max()))
    return {"dsmc": dsmc, "tp": tp}


def verify_c_fidis_and_immersion(table: AtomTable) -> dict:
    """Finite-dimensional laws given the bits.

    ``c_fidis``: ``P(X_{k_1..k_n} | all bits) = sum_{x_0} mu_{x_0} prod p~``.
    ``cond_ind``: the same law given all bits equals the law given
    ``F_{max k_i}``.  Both run over every nonempty set of epochs.
    """
    sc = table.scenario
    ptil = field_products(sc)
    bcode = _bit_code(table)
    all_bits = tuple(range(sc.K))
    mu = sc.initial_law
    fidis = cind = 0.0
    for r in range(1, sc.K + 2):
        for epochs in itertools.combinations(range(sc.K + 1), r):
            got = _cond_on(table, all_bits, (), (), epochs)
            k1 = epochs[0]
            first = (mu[None, :] @ ptil[bcode, 0, k1])[:, 0, :]
            expected = first[np.arange(table.size), table.path[:, k1]]
            for a, b in zip(epochs[:-1], epochs[1:]):
                expected = expected * ptil[bcode, a, b, table.path[:, a], table.path[:, b]]
            fidis = max(fidis, float(np.abs(got - expected).max()))
            partial = _cond_on(table, _bits_upto(sc, epochs[-1]), (), (), epochs)
            cind = max(cind, float(np.abs(got - partial).max()))
    return {"c_fidis": fidis, "cond_ind": cind}


def discrete_weights(sc: DiscreteScenario, table: AtomTable) -> np.ndarray:
    """Likelihood ratio ``dP/dQ`` on each atom of a ``Q``-table.

    Jumps contribute ``lambda^{xy} / a^{xy}``, stays
    ``(1 + lambda^{xx} dt) / (1 + a^{xx} dt)``; the initial law cancels.
    """
    lam = sc.intensity(_all_bits(sc.K))
    A = sc.reference_rates
    bcode = _bit_code(table)
    w = np.ones(table.size)
    for k in range(sc.K):
        x, y = table.path[:, k], table.path[:, k + 1]
        stay = x == y
        l = lam[bcode, k, x, y]
        num = np.where(stay, 1.0 + l * sc.dt, l)
        den = np.where(stay, 1.0 + A[x, y] * sc.dt, A[x, y])
        w *= num / den
    return w


def verify_discrete_girsanov(sc: DiscreteScenario) -> dict:
    """``Q(omega) w(omega) = P(omega)`` on every atom, mass and bit marginals."""
    P = enumerate_atoms(sc, "P", prune=False)
    Q = enumerate_atoms(sc, "Q", prune=False)
    if np.any((Q.prob == 0) & (P.prob > 0)):
        raise ValueError("P is not absolutely continuous with respect to Q")
    w = discrete_weights(sc, Q)
    bq = _group_sum(_bit_code(Q), Q.prob)
    bp = _group_sum(_bit_code(P), P.prob)
    return {
        "atoms": float(np.abs(Q.prob * w - P.prob).max()),
        "mass": float(abs((Q.prob * w).sum() - 1.0)),
        "bit_marginal": float(np.abs(bq - bp).max()),
    }


def verify_all(sc: DiscreteScenario) -> dict:
    """Every check on one scenario; discrepancies keyed by check name."""
    table = enumerate_atoms(sc, "P")
    out = {"mass": float(abs(table.prob.sum() - 1.0)), "cmc": verify_cmc(table)}
    out.update(verify_dsmc_and_tp(table))
    out.update(verify_c_fidis_and_immersion(table))
    g = verify_discrete_girsanov(sc)
    out.update({f"girsanov_{k}": v for k, v in g.items()})
    return out


def terminal_law(sc: DiscreteScenario, x0: int = 1) -> np.ndarray:
    """``P(X_K = y | X_0 = x0)`` by enumeration over atoms."""
    table = enumerate_atoms(sc, "P")
    start = table.path[:, 0] == x0 - 1
    mass = table.prob[start].sum()
    return np.bincount(table.path[start, -1], weights=table.prob[start], minlength=sc.d) / mass


def convergence_errors(G, T, steps=(2, 4, 8), x0=1, y=None) -> list[tuple[float, float]]:
    """``(dt, |oracle - exp(G T)|)`` for each step count, entry ``(x0, y)``."""
    G = as_generator(G)
    exact = expm(G * T)[x0 - 1]
    out = []
    for K in steps:
        law = terminal_law(constant_scenario(G, T, K, x0), x0)
        err = np.abs(law - exact)
        out.append((T / K, float(err.max() if y is None else err[y - 1])))
    return out


def loglog_slope(pairs) -> float:
    x = np.log([p[0] for p in pairs])
    y = np.log([p[1] for p in pairs])
    return float(np.polyfit(x, y, 1)[0])
