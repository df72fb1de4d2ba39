import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from langfield import synth


@pytest.fixture()
def rng():
    return np.random.default_rng(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def tiny_scene():
    scene = synth.two_spheres_box(views=4, size=48, feature_channels=32, n_points=300)
    scene.feature_downsample = 2
    return scene


@pytest.fixture(scope="session")
def tiny_bundle(tiny_scene):
    return synth.generate(tiny_scene, seed=0)


def pytest_terminal_summary(terminalreporter):
    """Surface the acceptance PASS lines even when output capture is on."""
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
