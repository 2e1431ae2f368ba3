import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from cmclab.core import ConstantIntensity, FactorPath, MixtureIntensity, ScaledIntensity, TimeGrid
from cmclab.kolmogorov import (
    PeanoBakerConvergenceError,
    expm,
    kolmogorov_residual,
    magnus2,
    magnus2_pieces,
    magnus_exponent,
    peano_baker,
    peano_baker_pieces,
    route_agreement,
    solve_ZY,
    transition_field,
)
from cmclab.scenario import shipped_names, shipped_scenario
from cmclab.simulate import sample_factor

P11_SYM = 0.5676676416183064  # (1 + exp(-2)) / 2
SYM = [[-1.0, 1.0], [1.0, -1.0]]


def _flat(grid, value=0.0):
    return FactorPath(grid, np.full(grid.K + 1, value))


@st.composite
def generators(draw, d=3, scale=3.0):
    off = draw(st.lists(st.floats(0.0, scale), min_size=d * d, max_size=d * d))
    G = np.array(off).reshape(d, d)
    np.fill_diagonal(G, 0.0)
    np.fill_diagonal(G, -G.sum(axis=1))
    return G


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-4, 4), min_size=9, max_size=9))
def test_expm_matches_scipy(entries):
    A = np.array(entries).reshape(3, 3)
    assert np.allclose(expm(A), scipy.linalg.expm(A), rtol=1e-12, atol=1e-12)


def test_expm_batch_and_zero():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(6, 4, 4)) * 2
    assert np.allclose(expm(A), np.stack([scipy.linalg.expm(a) for a in A]), rtol=1e-12, atol=1e-12)
    assert np.array_equal(expm(np.zeros((3, 3))), np.eye(3))


def test_zero_intensity_gives_identities():
    grid = TimeGrid(1.0, 10)
    Z, Y = solve_ZY(ConstantIntensity(np.zeros((2, 2))), _flat(grid), grid)
    assert np.array_equal(Z, np.broadcast_to(np.eye(2), Z.shape))
    assert np.array_equal(Y, np.broadcast_to(np.eye(2), Y.shape))
    field = transition_field(ConstantIntensity(np.zeros((2, 2))), _flat(grid), grid)
    assert np.array_equal(field.at_nodes(2, 9), np.eye(2))


def test_absorbing_half_life():
    T = math.log(2.0)
    grid = TimeGrid(T, 7)
    _, Y = solve_ZY(ConstantIntensity([[-1.0, 1.0], [0.0, 0.0]]), _flat(grid), grid)
    assert np.allclose(Y[-1, 0], [0.5, 0.5], atol=1e-14)


def test_symmetric_closed_form():
    grid = TimeGrid(2.0, 20)
    field = transition_field(ConstantIntensity(SYM), _flat(grid), grid)
    assert abs(field.P(0.5, 1.5)[0, 0] - P11_SYM) < 1e-12
    assert abs(field.P(1.0, 2.0)[1, 1] - P11_SYM) < 1e-12


def test_field_diagonal_is_exact_identity():
    sc = shipped_scenario("three_state")
    f = sample_factor(sc.driver, sc.grid, 3)
    field = transition_field(sc.model, f, sc.grid)
    for k in range(sc.grid.K + 1):
        assert np.array_equal(field.at_nodes(k, k), np.eye(3))
    with pytest.raises(ValueError):
        field.P(0.55, 0.8)
    with pytest.raises(ValueError):
        field.at_nodes(5, 2)


@pytest.mark.parametrize("name", shipped_names("continuous"))
def test_field_invariants_on_shipped(name):
    sc = shipped_scenario(name)
    for seed in range(3):
        f = sample_factor(sc.driver, sc.grid, seed)
        field = transition_field(sc.model, f, sc.grid)
        inv = field.invariants()
        assert inv["inverse_identity"] < 1e-9
        assert inv["row_sum"] < 1e-9
        assert inv["min_entry"] >= -1e-9 and inv["max_entry"] <= 1 + 1e-9
        assert inv["min_det"] > 0
        assert field.semigroup_error() < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.lists(generators(), min_size=1, max_size=6), st.floats(0.01, 0.5))
def test_field_matches_product_of_exponentials(gens, h):
    K = len(gens)
    G = np.stack(gens)
    grid = TimeGrid(h * K, K)

    class Table(ConstantIntensity):
        def _from_feature(self, z):
            return G[np.asarray(z, dtype=int)]

    model = Table(np.zeros((3, 3)))
    f = FactorPath(grid, np.arange(K + 1.0))
    field = transition_field(model, f, grid)
    P = np.eye(3)
    for g in G:
        P = P @ scipy.linalg.expm(g * h)
    assert np.allclose(field.at_nodes(0, K), P, atol=1e-12)
    inv = field.invariants()
    assert inv["row_sum"] < 1e-9 and inv["inverse_identity"] < 1e-9


# -- Peano-Baker ---------------------------------------------------------------


def test_peano_baker_zero_is_order_zero():
    grid = TimeGrid(1.0, 4)
    M, order = peano_baker(ConstantIntensity(np.zeros((2, 2))), _flat(grid), 0.0, 1.0)
    assert order == 0 and np.array_equal(M, np.eye(2))


@pytest.mark.parametrize("equation", ["backward", "forward"])
def test_peano_baker_constant_is_exponential(equation):
    grid = TimeGrid(1.0, 10)
    G = np.array([[-2.0, 1.5, 0.5], [0.3, -0.8, 0.5], [1.0, 1.0, -2.0]])
    M, order = peano_baker(ConstantIntensity(G), _flat(grid), 0.2, 1.0, tol=1e-10, equation=equation)
    assert np.abs(M - scipy.linalg.expm(G * 0.8)).max() < 1e-10
    assert order > 5


def test_peano_baker_reports_nonconvergence():
    G = np.array([[-20.0, 20.0], [20.0, -20.0]])
    with pytest.raises(PeanoBakerConvergenceError) as info:
        peano_baker_pieces(np.stack([G] * 4), 0.25, tol=1e-10, max_order=5)
    assert info.value.order == 5
    assert info.value.partial.shape == (2, 2)


@pytest.mark.parametrize("name", shipped_names("continuous"))
def test_peano_baker_agrees_with_field(name):
    sc = shipped_scenario(name)
    f = sample_factor(sc.driver, sc.grid, 11)
    field = transition_field(sc.model, f, sc.grid)
    for s, t in ((0.0, 1.0), (0.3, 0.7), (0.5, 0.6)):
        M, _ = peano_baker(sc.model, f, s, t, tol=1e-10)
        assert np.abs(M - field.P(s, t)).max() < 1e-8


# -- Magnus ----------------------------------------------------------------------


def test_magnus_constant_is_exact():
    grid = TimeGrid(1.0, 10)
    G = np.array([[-1.0, 0.7, 0.3], [0.2, -0.5, 0.3], [0.4, 0.4, -0.8]])
    phi = magnus_exponent(np.stack([G] * 10), 0.1)
    assert np.allclose(phi, G, atol=1e-15)
    assert np.abs(magnus2(ConstantIntensity(G), _flat(grid), 0.0, 1.0) - scipy.linalg.expm(G)).max() < 1e-13


def test_magnus_commuting_pieces():
    A = np.array([[-1.0, 1.0], [1.0, -1.0]])
    pieces = np.stack([A, 2.5 * A])
    exact = scipy.linalg.expm(A * 0.4) @ scipy.linalg.expm(2.5 * A * 0.4)
    assert np.abs(magnus2_pieces(pieces, 0.4) - exact).max() < 1e-12


def test_magnus_noncommuting_fine_grid():
    G1 = np.array([[-1.0, 1.0, 0.0], [0.0, -1.0, 1.0], [1.0, 0.0, -1.0]])
    G2 = np.array([[-2.0, 0.0, 2.0], [0.5, -0.5, 0.0], [0.0, 1.5, -1.5]])
    assert np.abs(G1 @ G2 - G2 @ G1).max() > 0.1
    # pieces switch at node 1001 of a 5e-4 grid, inside a 1e-3 Magnus step
    grid = TimeGrid(1.0, 2000)
    model = MixtureIntensity(G1, G2, link="step")
    f = FactorPath(grid, np.where(np.arange(2001) < 1001, -1.0, 1.0))
    field = transition_field(model, f, grid)
    exact = field.P(0.0, 1.0)
    stepped = magnus2(model, f, 0.0, 1.0, max_span=1e-3)
    assert np.abs(stepped - exact).max() < 1e-6
    # one exponent over the whole interval is visibly worse
    assert np.abs(magnus2(model, f, 0.0, 1.0) - exact).max() > 1e-3
    # local error control reaches the same accuracy
    assert np.abs(magnus2(model, f, 0.0, 1.0, tol=1e-8) - exact).max() < 1e-6


def test_magnus_guard_bisects_large_segments():
    G = np.array([[-6.0, 6.0], [6.0, -6.0]])
    B = np.array([[-1.0, 1.0], [3.0, -3.0]])
    pieces = np.stack([G, B] * 4)
    exact = np.eye(2)
    for g in pieces:
        exact = exact @ scipy.linalg.expm(g * 0.25)
    guarded = magnus2_pieces(pieces, 0.25)
    unguarded = magnus2_pieces(pieces, 0.25, guard=np.inf)
    assert np.abs(guarded - exact).max() < np.abs(unguarded - exact).max()


@pytest.mark.parametrize("name", shipped_names("continuous"))
def test_route_agreement_on_shipped(name):
    sc = shipped_scenario(name)
    f = sample_factor(sc.driver, sc.grid, 4)
    rep = route_agreement(sc.model, f)
    assert rep["exp_vs_pb"] < 1e-6
    assert rep["exp_vs_magnus"] < 1e-6
    assert rep["pb_vs_magnus"] < 1e-6


# -- Kolmogorov residuals ---------------------------------------------------------


def test_residual_zero_intensity_is_zero():
    grid = TimeGrid(1.0, 10)
    m = ConstantIntensity(np.zeros((2, 2)))
    res = kolmogorov_residual(transition_field(m, _flat(grid), grid), m, _flat(grid))
    assert res == {"backward": 0.0, "forward": 0.0}


def test_residual_constant_fine_grid():
    grid = TimeGrid(1.0, 1000)
    m = ConstantIntensity(SYM)
    res = kolmogorov_residual(transition_field(m, _flat(grid), grid), m, _flat(grid))
    assert res["backward"] < 1e-6 and res["forward"] < 1e-6


def test_residual_detects_wrong_model():
    sc = shipped_scenario("three_state")
    f = sample_factor(sc.driver, sc.grid, 2)
    field = transition_field(sc.model, f, sc.grid)
    good = kolmogorov_residual(field, sc.model, f)
    bad = kolmogorov_residual(field, ScaledIntensity(sc.model, 2.0), f)
    assert max(good.values()) < 1e-12
    assert min(bad.values()) > 1e-2
