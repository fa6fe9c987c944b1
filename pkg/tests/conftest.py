import numpy as np
import pytest

# Lines appended by the acceptance tests, echoed at the end of the run.
ACCEPTANCE_LINES: list[str] = []


def random_spd(rng, n, jitter=0.1):
    a = rng.standard_normal((n, n))
    return a @ a.T + jitter * np.eye(n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
