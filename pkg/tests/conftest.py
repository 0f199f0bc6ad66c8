import numpy as np
import pytest

from proxysign.channels import StreamConfig
from proxysign.synth import SynthConfig, synth_clips

# Reduced-resolution stream settings used wherever a real network is trained.
TINY_STREAM = StreamConfig(patch=32, resize_short=40, flow_bound=4.0)


@pytest.fixture(scope="session")
def clips():
    """The default synthetic dataset: 3 classes x 20 clips, 4 signers."""
    return synth_clips(SynthConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
