import numpy as np
import pytest

from greedyreg.filters import smooth_array

ACCEPTANCE_LINES = []


def smooth_random(shape, sigma, seed):
    rng = np.random.default_rng(seed)
    img = smooth_array(rng.random(shape), sigma)
    return (img - img.min()) / (img.max() - img.min())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
