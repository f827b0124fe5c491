import numpy as np
import pytest

from raunet.tensor import precision


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
