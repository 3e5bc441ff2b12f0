import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

# acceptance results, filled by test_acceptance.py and echoed in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
