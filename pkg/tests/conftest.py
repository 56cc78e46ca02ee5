import sys

import numpy as np
import pytest

from talkhead.autodiff import get_tape
from talkhead.head import make_mini_assets


@pytest.fixture(scope="session")
def assets():
    return make_mini_assets(0)


@pytest.fixture(autouse=True)
def _clean_tape():
    get_tape().clear()
    yield
    get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
