import numpy as np
import pytest

from tfdlab import rng as rngs
from tfdlab.datasets import SyntheticSpec
from tfdlab.networks import DenoiserNet
from tfdlab.teacher import NoiseSchedule, train_teacher

SMALL_WIDTHS = (32, 32, 32, 32)


def small_teacher(seed: int = 0, steps: int = 600):
    spec = SyntheticSpec()
    net = DenoiserNet(2, 8, SMALL_WIDTHS, 16, rng=rngs.seed_stream(seed, rngs.TEACHER_INIT))
    net, trace = train_teacher(spec, net, NoiseSchedule(), steps, 2e-3, rngs.seed_stream(seed, rngs.TEACHER_TRAIN), 128)
    return net, trace


@pytest.fixture(scope="session")
def trained_small():
    """A 4x32 teacher fitted to the 8-Gaussian ring in a couple of seconds."""
    return small_teacher()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
