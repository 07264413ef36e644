import sys

import numpy as np
import pytest

from rlhfse.policy import make_policy
from rlhfse.tfsignal import FrameSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_spec():
    # tiny frames keep finite-difference checks fast
    return FrameSpec(16000, 2.0, 1.0)


@pytest.fixture
def toy_policy():
    return make_policy(n_channels=1, hidden=8, seed=3)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
