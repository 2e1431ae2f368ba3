import math

import numpy as np
import pytest

from cmclab.core import ChainPath, ConstantIntensity, FactorPath, TimeGrid
from cmclab.scenario import scenario_from_dict, shipped_names, shipped_scenario
from cmclab.simulate import (
    BrownianDriver,
    ConstantDriver,
    ConstantLaw,
    EventBudgetError,
    build_weighted_ensemble,
    draw_blocks,
    effective_sample_size,
    radon_nikodym_weight,
    regenerate_path,
    sample_direct_ensemble,
    sample_factor,
    sample_initial,
    simulate_direct_dsmc,
    simulate_events,
    simulate_reference_chain,
    states_at_nodes,
)

N = 100_000
E_INV = 0.36787944117144233  # exp(-1)


def _constant_scenario(G, A, probs, K=10, lam_max=None):
    G = np.asarray(G, dtype=float)
    off = ~np.eye(len(G), dtype=bool)
    return scenario_from_dict({
        "name": "test_constant", "states": len(G), "grid": {"T": 1.0, "K": K},
        "factor": {"driver": "constant", "value": 0.0},
        "intensity": {"model": "constant", "matrix": G.tolist()},
        "reference_rates": A, "initial_law": {"law": "constant", "probs": probs},
        "lambda_max": float(G[off].max()) if lam_max is None else lam_max,
    })


# -- factor and initial law ------------------------------------------------------


def test_constant_driver_is_flat():
    f = sample_factor(ConstantDriver(0.7), TimeGrid(1.0, 10), seed=3)
    assert np.all(f.values == 0.7)
    assert f.jump_times.size == 0


def test_brownian_driver_reproducible():
    grid = TimeGrid(1.0, 10)
    a = sample_factor(BrownianDriver(), grid, seed=12)
    b = sample_factor(BrownianDriver(), grid, seed=12)
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, sample_factor(BrownianDriver(), grid, seed=13).values)


def test_brownian_terminal_variance():
    grid = TimeGrid(1.0, 10)
    drv = BrownianDriver()
    values, _ = drv.build(draw_blocks(5, N, drv.n_draws(grid)), grid)
    fT = values[:, -1]
    var = fT.var(ddof=1)
    se = math.sqrt((np.mean((fT - fT.mean()) ** 4) - var ** 2) / N)
    assert abs(var - grid.T) <= 3 * se
    # increments are independent N(0, dt)
    inc = np.diff(values, axis=1)
    assert abs(np.corrcoef(inc[:, 2], inc[:, 3])[0, 1]) < 3 / math.sqrt(N)


def test_initial_law_degenerate():
    grid = TimeGrid(1.0, 10)
    f = FactorPath(grid, np.zeros(11))
    assert {sample_initial(ConstantLaw((1.0, 0.0)), f, seed=s) for s in range(50)} == {1}


def test_initial_law_fair_frequency():
    sc = _constant_scenario([[-1.0, 1.0], [1.0, -1.0]], [[-1.0, 1.0], [1.0, -1.0]], [0.5, 0.5])
    e = build_weighted_ensemble(sc, N, seed=4)
    freq = np.mean(e.x0 == 0)
    assert abs(freq - 0.5) <= 3 * 0.5 / math.sqrt(N)


def test_initial_law_by_factor_sign(two_state_ensemble, two_state):
    e = two_state_ensemble
    pos = e.factor[:, 0] > 0
    for mask, probs in ((pos, two_state.initial_law.positive), (~pos, two_state.initial_law.negative)):
        p = probs[0]
        freq = np.mean(e.x0[mask] == 0)
        assert abs(freq - p) <= 3 * math.sqrt(p * (1 - p) / mask.sum())


# -- reference chain -------------------------------------------------------------


def test_reference_chain_zero_jump_fraction():
    A = [[-1.0, 1.0], [1.0, -1.0]]
    e = build_weighted_ensemble(_constant_scenario(A, A, [1.0, 0.0]), N, seed=8)
    frac = np.mean(~np.isfinite(e.times[:, 0]))
    assert abs(frac - E_INV) <= 3 * math.sqrt(E_INV * (1 - E_INV) / N)


def test_reference_chain_thinned_rate():
    A = [[-1.0, 1.0], [1e-9, -1e-9]]
    e = build_weighted_ensemble(_constant_scenario(A, A, [0.0, 1.0], lam_max=1.0), N, seed=9)
    from_two = np.sum(e.src == 1)
    assert from_two / N < 1e-6


def test_reference_chain_reproducible():
    grid = TimeGrid(1.0, 10)
    A = [[-1.0, 1.0], [2.0, -2.0]]
    a = simulate_reference_chain(A, 1, grid, seed=21)
    assert a == simulate_reference_chain(A, 1, grid, seed=21)
    assert all(0 < t <= 1.0 for t in a.jump_times)


def test_reference_rates_must_be_positive():
    with pytest.raises(ValueError):
        simulate_reference_chain([[0.0, 0.0], [1.0, -1.0]], 1, TimeGrid(1.0, 2), seed=0)


# -- Radon-Nikodym weights --------------------------------------------------------


def test_weight_stay_in_state_one():
    grid = TimeGrid(1.0, 10)
    f = FactorPath(grid, np.zeros(11))
    model = ConstantIntensity([[-2.0, 2.0], [0.0, 0.0]])
    A = [[-1.0, 1.0], [1.0, -1.0]]
    eta_T, eta = radon_nikodym_weight(ChainPath(1, (), 1.0), f, model, A, grid)
    assert eta_T == pytest.approx(E_INV, rel=1e-13)
    assert np.allclose(eta, np.exp(-grid.nodes), rtol=1e-13)


def test_weight_one_jump():
    grid = TimeGrid(1.0, 10)
    f = FactorPath(grid, np.zeros(11))
    model = ConstantIntensity([[-2.0, 2.0], [0.0, 0.0]])
    A = [[-1.0, 1.0], [1.0, -1.0]]
    eta_T, _ = radon_nikodym_weight(ChainPath(1, ((0.5, 1, 2),), 1.0), f, model, A, grid)
    assert eta_T == pytest.approx(2.0, rel=1e-13)
    # a jump the model forbids gives a zero weight, not an error
    back = ChainPath(1, ((0.5, 1, 2), (0.7, 2, 1)), 1.0)
    assert radon_nikodym_weight(back, f, model, A, grid)[0] == 0.0


def test_weight_jump_between_nodes_uses_left_limit():
    # lambda^{12} is 1 on [0, 0.5) and 3 on [0.5, 1); a jump exactly at 0.5
    # must use the left limit 1
    from cmclab.core import MixtureIntensity

    grid = TimeGrid(1.0, 2)
    m = MixtureIntensity([[-1.0, 1.0], [1.0, -1.0]], [[-3.0, 3.0], [1.0, -1.0]], link="step")
    f = FactorPath(grid, np.array([-1.0, 1.0, 1.0]))
    A = [[-1.0, 1.0], [1.0, -1.0]]
    eta_T, _ = radon_nikodym_weight(ChainPath(1, ((0.5, 1, 2),), 1.0), f, m, A, grid)
    assert eta_T == pytest.approx(1.0, rel=1e-13)


def test_model_equal_to_reference_gives_unit_weights():
    e = build_weighted_ensemble(shipped_scenario("reference"), 5000, seed=2)
    assert np.all(e.eta == 1.0)
    assert effective_sample_size(e) == e.n


@pytest.mark.parametrize("name", shipped_names("continuous"))
def test_weight_mean_is_one(name):
    e = build_weighted_ensemble(shipped_scenario(name), N, seed=31)
    w = e.weights
    assert np.all(w >= 0)
    assert abs(w.mean() - 1.0) <= 3 * w.std(ddof=1) / math.sqrt(N)
    assert effective_sample_size(w) / N > 0.1


def test_weights_positive_where_model_allows(two_state_ensemble):
    assert np.all(two_state_ensemble.eta > 0)


def test_unreachable_state_paths_get_zero_weight():
    e = build_weighted_ensemble(shipped_scenario("unreachable"), 5000, seed=1)
    visits = (e.states() == 2).any(axis=1)
    assert visits.any()
    assert np.all(e.weights[visits] == 0)


def test_measure_restriction_on_factor(two_state_ensemble):
    e = two_state_ensemble
    for phi in (e.factor[:, -1] > 0, e.factor[:, 5] > 0.5, np.tanh(e.factor[:, -1])):
        phi = phi.astype(float)
        diff = (e.weights - 1.0) * phi
        assert abs(diff.mean()) <= 3 * diff.std(ddof=1) / math.sqrt(e.n)


def test_initial_law_not_shifted_by_factor_future(two_state_ensemble, two_state):
    e = two_state_ensemble
    w = e.weights
    for f0 in (True, False):
        for fT in (True, False):
            cell = ((e.factor[:, 0] > 0) == f0) & ((e.factor[:, -1] > 0) == fT)
            mu = two_state.initial_law.positive if f0 else two_state.initial_law.negative
            D = (e.x0[cell] == 0) - mu[0]
            wc = w[cell]
            est = (wc * D).sum() / wc.sum()
            se = math.sqrt((wc ** 2 * (D - est) ** 2).sum()) / wc.sum()
            assert abs(est) <= 3 * se


# -- reproducibility ------------------------------------------------------------


def test_ensemble_bitwise_reproducible(three_state):
    a = build_weighted_ensemble(three_state, 3000, seed=5, workers=1)
    b = build_weighted_ensemble(three_state, 3000, seed=5, workers=2)
    for name in ("factor", "x0", "times", "src", "dst", "eta"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_any_path_regenerates_in_isolation(three_state):
    e = build_weighted_ensemble(three_state, 300, seed=6)
    for i in (0, 17, 299):
        f, c, w = regenerate_path(three_state, 6, i)
        f0, c0, w0 = e.path(i)
        assert np.array_equal(f.values, f0.values)
        assert c == c0 and w == w0


# -- direct sampler ---------------------------------------------------------------


def test_direct_sampler_no_intensity_never_jumps():
    grid = TimeGrid(1.0, 10)
    f = FactorPath(grid, np.zeros(11))
    for s in range(20):
        p = simulate_direct_dsmc(ConstantIntensity(np.zeros((2, 2))), ConstantLaw((0.5, 0.5)), f, grid, seed=s)
        assert p.jumps == ()


def test_direct_sampler_absorbing_survival():
    G = [[-1.0, 1.0], [0.0, 0.0]]
    sc = _constant_scenario(G, [[-1.0, 1.0], [1.0, -1.0]], [1.0, 0.0])
    e = sample_direct_ensemble(sc, N, seed=10)
    states = e.states()
    for k in (2, 5, 10):
        t = sc.grid.nodes[k]
        p = math.exp(-t)
        assert abs(np.mean(states[:, k] == 0) - p) <= 3 * math.sqrt(p * (1 - p) / N)


def test_direct_single_path_matches_ensemble_law():
    G = [[-1.0, 1.0], [0.0, 0.0]]
    grid = TimeGrid(1.0, 10)
    f = FactorPath(grid, np.zeros(11))
    n = 3000
    alive = sum(
        simulate_direct_dsmc(ConstantIntensity(G), ConstantLaw((1.0, 0.0)), f, grid, seed=s).state_at(1.0) == 1
        for s in range(n)
    )
    assert abs(alive / n - E_INV) <= 3 * math.sqrt(E_INV * (1 - E_INV) / n)


# -- ESS and budgets --------------------------------------------------------------


def test_effective_sample_size_examples():
    assert effective_sample_size(np.ones(50)) == 50
    w = np.zeros(50)
    w[0] = 2.0
    assert effective_sample_size(w) == 1.0


def test_event_budget_exhaustion_raises():
    grid = TimeGrid(1.0, 4)
    G = np.broadcast_to(np.array([[-50.0, 50.0], [50.0, -50.0]]), (1, 4, 2, 2))
    u = np.full((1, 2 * 3), 0.5)
    with pytest.raises(EventBudgetError):
        simulate_events(G, np.array([0]), grid, u)


def test_states_at_nodes_cadlag():
    grid = TimeGrid(1.0, 4)
    times = np.array([[0.25, 0.6, np.inf]])
    dst = np.array([[1, 0, -1]])
    assert states_at_nodes(np.array([0]), times, dst, grid).tolist() == [[0, 1, 1, 0, 0]]
