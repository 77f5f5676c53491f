import numpy as np
import pytest

from screenopt.design import load_fixture, load_fixture_responses

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running simulation or search")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def fixtures():
    return {name: load_fixture(name) for name in ("new_design", "nrffd", "bayes_d", "edma",
                                                  "k6n17_adsd", "k6n17_best", "k7n24_best")}


@pytest.fixture(scope="session")
def responses():
    return {name: load_fixture_responses(name)[1] for name in ("new_design", "nrffd", "bayes_d", "edma")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
