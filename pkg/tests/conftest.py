import numpy as np
import pytest

from mof.data import generate_dataset
from mof.encoders import EncoderDims, init_params

MICRO = EncoderDims(patch=4, height=8, width=8, channels=3, hidden=4, embed=4, max_frames=8, vocab=10)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(0, n_train=16, n_test=8, frames=8, height=8, width=8)


@pytest.fixture(scope="session")
def default_dataset():
    return generate_dataset(0)


@pytest.fixture
def micro_theta():
    return init_params(MICRO, 0, "f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
