import numpy as np
import pytest

from cogplan.alignment import DrivingThinkingAligner, VideoEncoder, preprocess_pairs
from cogplan.synth import gen_pairs, gen_scenes

# acceptance results, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_pairs():
    return preprocess_pairs(gen_pairs(40, noise=0.05, seed=11))


@pytest.fixture(scope="session")
def small_aligner(small_pairs):
    return DrivingThinkingAligner(epochs=3, lr=1e-3, seed=11).fit(small_pairs)


@pytest.fixture(scope="session")
def scenes():
    return gen_scenes(48, seed=3)


@pytest.fixture
def encoder():
    return VideoEncoder(np.random.default_rng(0), embed_dim=200, dropout=0.0)
