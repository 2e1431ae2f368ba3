from pathlib import Path

import pytest

from cmclab.scenario import shipped_scenario
from cmclab.simulate import build_weighted_ensemble, sample_direct_ensemble

FIXTURES = Path(__file__).parent / "fixtures"
N_LARGE = 100_000

# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


def record(number, title, passed, detail=""):
    ACCEPTANCE[number] = (title, bool(passed), detail)


@pytest.fixture(scope="session")
def two_state():
    return shipped_scenario("two_state")


@pytest.fixture(scope="session")
def three_state():
    return shipped_scenario("three_state")


@pytest.fixture(scope="session")
def two_state_ensemble(two_state):
    return build_weighted_ensemble(two_state, N_LARGE, seed=20240)


@pytest.fixture(scope="session")
def three_state_ensemble(three_state):
    return build_weighted_ensemble(three_state, N_LARGE, seed=777)


@pytest.fixture(scope="session")
def three_state_direct(three_state):
    return sample_direct_ensemble(three_state, N_LARGE, seed=778)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {k:2d}. {title}: {detail}")
