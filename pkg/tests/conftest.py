import sys

import numpy as np
import pytest

from crcbounds.tables import pwid_table

PWID = (21, 103, 13, 89, 29, 24, 27)


@pytest.fixture
def pwid():
    return pwid_table()


@pytest.fixture
def pwid_means():
    return np.array(PWID, dtype=float)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
