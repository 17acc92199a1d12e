import numpy as np
import pytest

from iqadefbench.core import Image, build_toy_metric


@pytest.fixture(scope="session")
def toy():
    return build_toy_metric(7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def textured(size=32, seed=0):
    r = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = np.stack([0.5 + 0.3 * np.sin(6 * xx + c) * np.cos(4 * yy - c) for c in range(3)], axis=2)
    return Image(np.clip(base + 0.05 * r.standard_normal(base.shape), 0.05, 0.95))


@pytest.fixture
def tex():
    return textured(32, 0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
