import numpy as np
import pytest

from artn import autodiff as ad

# filled by test_acceptance.py; printed once at the end of the session
ACCEPTANCE_LINES: dict = {}


@pytest.fixture(autouse=True)
def float64_default():
    prev = ad.get_default_dtype()
    ad.set_default_dtype(np.float64)
    yield
    ad.set_default_dtype(prev)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
