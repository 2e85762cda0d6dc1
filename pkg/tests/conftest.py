import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


ACCEPTANCE: dict = {}


def record(criterion: str, ok: bool, detail: str = "") -> None:
    """Log an acceptance verdict; the line is echoed at the end of the session."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE[criterion] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
