import numpy as np
import pytest

from unoise import tensor as T


@pytest.fixture(autouse=True)
def float64_mode():
    """Tests run in 64-bit unless they opt into 32-bit explicitly."""
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
