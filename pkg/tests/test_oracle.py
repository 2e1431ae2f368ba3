import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmclab.oracle import (
    MAX_K,
    OracleSizeError,
    conditional_probability,
    constant_scenario,
    convergence_errors,
    discrete_from_dict,
    enumerate_atoms,
    load_discrete,
    loglog_slope,
    terminal_law,
    verify_all,
    verify_c_fidis_and_immersion,
    verify_cmc,
    verify_discrete_girsanov,
    verify_dsmc_and_tp,
)
from cmclab.scenario import shipped_doc, shipped_names

from conftest import FIXTURES

SYM = [[-1.0, 1.0], [1.0, -1.0]]


def _shipped(name):
    return discrete_from_dict(shipped_doc(name))


def test_k1_zero_intensity_atoms():
    sc = constant_scenario(np.zeros((2, 2)), 0.1, 1)
    table = enumerate_atoms(sc, "P")
    # 2 bit values x the one trajectory held at state 1
    assert table.size == 2
    assert np.all(table.path[:, 0] == table.path[:, 1])
    full = enumerate_atoms(sc, "P", prune=False)
    assert full.size == 2 ** 1 * 2 ** 2
    # with mass on both states: 2 bits x 2 constant trajectories
    spread = dataclasses.replace(sc, initial_law=np.array([0.5, 0.5]))
    assert enumerate_atoms(spread, "P").size == 4


def test_hand_enumerated_two_step_value():
    table = enumerate_atoms(_shipped("oracle_k2"), "P")
    p = table.prob[table.path[:, 2] == 1].sum()
    assert abs(p - 0.275) < 1e-15


@pytest.mark.parametrize("name", shipped_names("discrete"))
@pytest.mark.parametrize("measure", ["P", "Q"])
def test_probabilities_sum_to_one(name, measure):
    table = enumerate_atoms(_shipped(name), measure)
    assert np.all(table.prob > 0)
    assert abs(table.prob.sum() - 1.0) < 1e-14


def test_conditional_probability_trivial_cases():
    table = enumerate_atoms(_shipped("oracle_k3"), "P")
    certain = conditional_probability(table, np.ones(table.size, dtype=bool), ((0,), (1,)))
    assert np.allclose(certain, 1.0, atol=1e-15)
    event = table.path[:, 3] == 0
    uncond = conditional_probability(table, event, ((), ()))
    assert np.allclose(uncond, table.prob[event].sum(), atol=1e-15)
    with pytest.raises((TypeError, ValueError)):
        conditional_probability(table, "not an event", ((0,), ()))


def test_conditional_probability_callable_matches_mask():
    table = enumerate_atoms(_shipped("oracle_k2"), "P")
    a = conditional_probability(table, table.path[:, 2] == 1, ((0,), ()))
    b = conditional_probability(table, lambda t: t.path[:, 2] == 1, ((0,), ()))
    assert np.array_equal(a, b)
    # given the first bit the two branches of the hand computation
    hi = a[table.bits[:, 0] == 1]
    lo = a[table.bits[:, 0] == 0]
    assert np.allclose(lo, 0.1 + 0.9 * 0.1, atol=1e-15)
    assert np.allclose(hi, 0.2 + 0.8 * 0.2, atol=1e-15)


@pytest.mark.parametrize("name", shipped_names("discrete"))
def test_shipped_scenarios_are_exact(name):
    out = verify_all(_shipped(name))
    for key, value in out.items():
        assert value < 1e-12, (key, value)


def test_step_tamper_is_detected():
    table = enumerate_atoms(load_discrete(FIXTURES / "oracle_tamper_step.json"), "P")
    assert verify_cmc(table) > 1e-3
    tp = verify_dsmc_and_tp(table)
    assert tp["dsmc"] > 1e-3 and tp["tp"] > 1e-3


def test_future_bit_initial_law_breaks_conditional_independence():
    sc = load_discrete(FIXTURES / "oracle_tamper_mu.json")
    out = verify_c_fidis_and_immersion(enumerate_atoms(sc, "P"))
    assert out["cond_ind"] > 1e-3
    assert out["c_fidis"] > 1e-3


@pytest.mark.parametrize("fixture", ["oracle_tamper_step.json", "oracle_tamper_mu.json"])
def test_every_tamper_fails_some_check(fixture):
    out = verify_all(load_discrete(FIXTURES / fixture))
    assert max(out.values()) > 1e-3


def test_size_guard():
    with pytest.raises(OracleSizeError):
        load_discrete(FIXTURES / "oracle_too_big.json")
    with pytest.raises(OracleSizeError):
        constant_scenario(np.zeros((2, 2)), 1.0, MAX_K + 1)
    with pytest.raises(OracleSizeError):
        constant_scenario(np.zeros((4, 4)), 1.0, 2)


def test_stochasticity_guard():
    with pytest.raises(ValueError):
        constant_scenario([[-30.0, 30.0], [1.0, -1.0]], 1.0, 2)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 3.0), st.floats(0.0, 3.0), st.integers(1, 5))
def test_constant_oracle_matches_matrix_power(a, b, K):
    G = np.array([[-a, a], [b, -b]])
    T = 0.3
    sc = constant_scenario(G, T, K)
    step = np.linalg.matrix_power(np.eye(2) + G * T / K, K)
    assert np.allclose(terminal_law(sc, 1), step[0], atol=1e-14)


@pytest.mark.parametrize("name", shipped_names("discrete"))
def test_discrete_girsanov(name):
    out = verify_discrete_girsanov(_shipped(name))
    assert out["atoms"] < 1e-15
    assert out["mass"] < 1e-14
    assert out["bit_marginal"] < 1e-15


def test_convergence_to_matrix_exponential():
    errs = convergence_errors(SYM, 0.2, steps=(2, 4, 8))
    assert [round(dt, 12) for dt, _ in errs] == [0.1, 0.05, 0.025]
    assert errs[0][1] > errs[1][1] > errs[2][1]
    assert abs(loglog_slope(errs) - 1.0) <= 0.3
