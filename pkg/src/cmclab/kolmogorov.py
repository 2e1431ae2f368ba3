"""Random Kolmogorov equations on one factor path.

``Z`` and ``Y`` solve ``dZ = -Lambda Z dt`` and ``dY = Y Lambda dt`` with
identity initial values.  Because ``Lambda`` is constant on each grid
interval they are propagated exactly by matrix exponentials, and the
conditional transition field is ``P(s, t) = Z_s Y_t``.  Peano-Baker and
order-2 Magnus are independent routes to the same matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import FactorPath, IntensityModel, TimeGrid
from .simulate import intensity_path

EXPM_TOL = 1e-14


def expm(a, tol: float = EXPM_TOL) -> np.ndarray:
    """Matrix exponential of one matrix or a stack ``(..., d, d)``.

    Scaling and squaring: the batch is scaled so the largest max-abs row
    sum is at most 1/2, the Taylor series is summed until a term's
    entries fall below ``tol`` (relative to the partial sum), then the
    result is squared back.
    """
    a = np.asarray(a, dtype=float)
    d = a.shape[-1]
    norm = float(np.max(np.abs(a).sum(axis=-1), initial=0.0))
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    b = a / (2.0 ** squarings)
    eye = np.broadcast_to(np.eye(d), a.shape)
    result = eye.copy()
    term = eye.copy()
    for k in range(1, 60):
        term = term @ b / k
        result = result + term
        if np.max(np.abs(term), initial=0.0) <= tol * max(1.0, np.max(np.abs(result), initial=0.0)):
            break
    for _ in range(squarings):
        result = result @ result
    return result


def solve_zy_batch(G: np.ndarray, dt: float):
    """Exact propagation of ``Z`` and ``Y`` for stacked paths.

    ``G``: ``(n, K, d, d)`` generators per interval.
    Returns ``Z, Y`` each ``(n, K+1, d, d)``.
    """
    G = np.asarray(G, dtype=float)
    n, K, d, _ = G.shape
    fwd = expm(G * dt)
    back = expm(-G * dt)
    Z = np.empty((n, K + 1, d, d))
    Y = np.empty((n, K + 1, d, d))
    Z[:, 0] = np.eye(d)
    Y[:, 0] = np.eye(d)
    for k in range(K):
        Z[:, k + 1] = back[:, k] @ Z[:, k]
        Y[:, k + 1] = Y[:, k] @ fwd[:, k]
    return Z, Y


def solve_ZY(model: IntensityModel, f: FactorPath, grid: TimeGrid):
    """``(Z, Y)`` at every node of ``grid`` for the factor path ``f``."""
    G = intensity_path(model, f)
    Z, Y = solve_zy_batch(G[None], grid.dt)
    return Z[0], Y[0]


@dataclass(frozen=True)
class TransitionField:
    grid: TimeGrid
    Z: np.ndarray
    Y: np.ndarray

    @property
    def d(self) -> int:
        return self.Z.shape[-1]

    def at_nodes(self, i: int, j: int) -> np.ndarray:
        if not 0 <= i <= j <= self.grid.K:
            raise ValueError(f"need node indices 0 <= s <= t <= K, got {i}, {j}")
        if i == j:
            return np.eye(self.d)
        return self.Z[i] @ self.Y[j]

    def P(self, s: float, t: float) -> np.ndarray:
        return self.at_nodes(self.grid.node_index(s), self.grid.node_index(t))

    def all_pairs(self) -> np.ndarray:
        """``P[i, j]`` for all node pairs; entries with ``i > j`` are NaN."""
        P = np.einsum("iab,jbc->ijac", self.Z, self.Y)
        K1 = self.grid.K + 1
        P[np.arange(K1), np.arange(K1)] = np.eye(self.d)
        lower = np.tril_indices(K1, -1)
        P[lower] = np.nan
        return P

    def invariants(self) -> dict:
        d = self.d
        P = self.all_pairs()
        upper = np.triu_indices(self.grid.K + 1)
        Pu = P[upper]
        inv_err = np.abs(self.Z @ self.Y - np.eye(d)).max()
        row_err = np.abs(Pu.sum(axis=-1) - 1.0).max()
        return {
            "inverse_identity": float(inv_err),
            "row_sum": float(row_err),
            "min_entry": float(Pu.min()),
            "max_entry": float(Pu.max()),
            "min_det": float(np.linalg.det(Pu).min()),
        }

    def semigroup_error(self, triples=None) -> float:
        K = self.grid.K
        if triples is None:
            triples = [(i, j, k) for i in range(K + 1) for j in range(i, K + 1) for k in range(j, K + 1)]
        err = 0.0
        for i, j, k in triples:
            lhs = self.at_nodes(i, j) @ self.at_nodes(j, k)
            err = max(err, float(np.abs(lhs - self.at_nodes(i, k)).max()))
        return err


def transition_field(model: IntensityModel, f: FactorPath, grid: TimeGrid) -> TransitionField:
    Z, Y = solve_ZY(model, f, grid)
    return TransitionField(grid, Z, Y)


def _pieces(model, f, v, t):
    grid = f.grid
    i, j = grid.node_index(v), grid.node_index(t)
    if i > j:
        raise ValueError("need v <= t")
    return intensity_path(model, f)[i:j], grid.dt


class PeanoBakerConvergenceError(RuntimeError):
    def __init__(self, order: int, partial: np.ndarray, last_term: float):
        super().__init__(f"Peano-Baker series not converged at order {order} (last term {last_term:.3e})")
        self.order = order
        self.partial = partial
        self.last_term = last_term


def peano_baker(model, f, v, t, tol: float = 1e-10, max_order: int = 200, equation: str = "backward"):
    """Truncated Peano-Baker series for ``P(v, t)``; returns ``(matrix, order)``.

    The order-``n`` term of the series is the iterated integral of ``n``
    generator factors.  On a constant piece of length ``h`` it is the
    ``n``-th graded part of ``exp(Gamma h)`` times the remaining series,
    so the recursion over pieces is exact:

    backward, from ``t`` down to ``v``:
        ``T_n(t_k) = sum_m (Gamma_k h)^m / m! T_{n-m}(t_{k+1})``
    forward, from ``v`` up to ``t``:
        ``S_n(t_{k+1}) = sum_m S_{n-m}(t_k) (Gamma_k h)^m / m!``
    """
    G, h = _pieces(model, f, v, t)
    return peano_baker_pieces(G, h, tol, max_order, equation)


def peano_baker_pieces(G, h, tol=1e-10, max_order=200, equation="backward"):
    G = np.asarray(G, dtype=float)
    J = len(G)
    d = G.shape[-1]
    eye = np.eye(d)
    if J == 0:
        return eye, 0
    if equation not in ("backward", "forward"):
        raise ValueError(f"unknown equation {equation!r}")
    # powers[m, k] = (G_k h)^m / m!;  terms[n, k] = order-n term at segment node k
    powers = np.zeros((max_order + 1, J, d, d))
    powers[0] = eye
    terms = np.zeros((max_order + 1, J + 1, d, d))
    terms[0] = eye
    total = eye.copy()
    size = np.inf
    for n in range(1, max_order + 1):
        powers[n] = powers[n - 1] @ (G * h) / n
        if equation == "backward":
            for k in range(J - 1, -1, -1):
                mixed = powers[1:n + 1, k] @ terms[n - 1::-1, k + 1]
                terms[n, k] = terms[n, k + 1] + mixed.sum(axis=0)
            value = terms[n, 0]
        else:
            for k in range(J):
                mixed = terms[n - 1::-1, k] @ powers[1:n + 1, k]
                terms[n, k + 1] = terms[n, k] + mixed.sum(axis=0)
            value = terms[n, J]
        size = float(np.abs(value).max())
        if size < tol:
            return total, n - 1
        total = total + value
    raise PeanoBakerConvergenceError(max_order, total, size)


def magnus2(model, f, v, t, guard: float = math.pi, tol: float | None = None,
            max_span: float | None = None) -> np.ndarray:
    """Order-2 Magnus approximation of ``P(v, t)``.

    ``Phi_1 = sum Gamma_k h`` and ``Phi_2 = 1/2 sum_{k<l} h^2 [Gamma_k, Gamma_l]``
    are exact for piecewise-constant generators.  A segment is bisected
    while ``int ||Gamma||_2`` reaches ``guard``, while it is longer than
    ``max_span`` (if given), and, with ``tol`` set, while the one-segment
    result differs from the product of its halves by more than ``tol``.
    """
    G, h = _pieces(model, f, v, t)
    return magnus2_pieces(G, h, guard, tol, max_span)


def magnus_exponent(G, h) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    phi1 = G.sum(axis=0) * h
    before = np.cumsum(G, axis=0) - G
    comm = before @ G - G @ before
    phi2 = 0.5 * h * h * comm.sum(axis=0)
    return phi1 + phi2


def magnus2_pieces(G, h, guard=math.pi, tol=None, max_span=None) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    J = len(G)
    if J == 0:
        return np.eye(G.shape[-1])
    if J == 1:
        return expm(G[0] * h)
    mid = J // 2

    def split():
        return magnus2_pieces(G[:mid], h, guard, tol, max_span) @ magnus2_pieces(G[mid:], h, guard, tol, max_span)

    weight = float(np.linalg.norm(G, ord=2, axis=(1, 2)).sum() * h)
    too_long = max_span is not None and J * h > max_span * (1 + 1e-12)
    if weight >= guard or too_long:
        return split()
    whole = expm(magnus_exponent(G, h))
    if tol is None:
        return whole
    halves = split()
    if np.abs(whole - halves).max() < tol:
        return whole
    return halves


def integrated_exponential(G, h) -> np.ndarray:
    """``int_0^h exp(G u) du`` for a stack of generators, via an augmented exponential."""
    G = np.asarray(G, dtype=float)
    d = G.shape[-1]
    big = np.zeros(G.shape[:-2] + (2 * d, 2 * d))
    big[..., :d, :d] = G * h
    big[..., :d, d:] = np.eye(d) * h
    return expm(big)[..., :d, d:]


def kolmogorov_residual(field: TransitionField, model: IntensityModel, f: FactorPath) -> dict:
    """Max-abs residuals of the integral Kolmogorov equations over node pairs.

    backward: ``P(v,t) - I - int_v^t Gamma_u P(u,t) du``
    forward:  ``P(v,t) - I - int_v^t P(v,u) Gamma_u du``

    On a constant piece ``[t_k, t_k + h]`` the field moves by ``exp(Gamma_k .)``,
    so each piece integral is ``Gamma_k E_k P(t_{k+1}, t)`` (backward) or
    ``P(v, t_k) E_k Gamma_k`` (forward) with ``E_k = int_0^h exp(Gamma_k u) du``.
    ``Gamma`` is taken from ``model``, the field from ``field``, so a field
    built from another model leaves a visible residual.
    """
    G = intensity_path(model, f)
    K = field.grid.K
    E = integrated_exponential(G, field.grid.dt)
    GE = G @ E
    eye = np.eye(field.d)
    back = 0.0
    fwd = 0.0
    for t in range(1, K + 1):
        Pk = field.Z[: t + 1] @ field.Y[t]
        Pk[t] = eye
        pieces = GE[:t] @ Pk[1:]
        tail = np.cumsum(pieces[::-1], axis=0)[::-1]
        back = max(back, float(np.abs(Pk[:t] - eye - tail).max()))
    for v in range(K):
        Pv = field.Z[v] @ field.Y[v:]
        Pv[0] = eye
        pieces = Pv[:-1] @ GE[v:]
        head = np.cumsum(pieces, axis=0)
        fwd = max(fwd, float(np.abs(Pv[1:] - eye - head).max()))
    return {"backward": back, "forward": fwd}


def route_agreement(model, f, pairs=None, pb_tol=1e-10, magnus_tol=1e-7) -> dict:
    """Pairwise max-abs differences of the three routes over node pairs."""
    grid = f.grid
    field = transition_field(model, f, grid)
    G = intensity_path(model, f)
    if pairs is None:
        pairs = [(0, grid.K)] + [(i, j) for i in range(grid.K) for j in (i + 1, grid.K) if j > i]
        pairs = sorted(set(pairs))
    worst = {"exp_vs_pb": 0.0, "exp_vs_magnus": 0.0, "pb_vs_magnus": 0.0}
    max_order = 0
    for i, j in pairs:
        exact = field.at_nodes(i, j)
        pb, order = peano_baker_pieces(G[i:j], grid.dt, pb_tol)
        mg = magnus2_pieces(G[i:j], grid.dt, tol=magnus_tol)
        max_order = max(max_order, order)
        worst["exp_vs_pb"] = max(worst["exp_vs_pb"], float(np.abs(exact - pb).max()))
        worst["exp_vs_magnus"] = max(worst["exp_vs_magnus"], float(np.abs(exact - mg).max()))
        worst["pb_vs_magnus"] = max(worst["pb_vs_magnus"], float(np.abs(pb - mg).max()))
    worst["max_order"] = max_order
    worst["pairs"] = len(pairs)
    return worst
