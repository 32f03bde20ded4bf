import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    for title, table in acceptance.EXTRA_REPORTS:
        terminalreporter.write_sep("=", title)
        for line in table:
            terminalreporter.write_line(line)
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
