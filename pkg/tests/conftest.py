import numpy as np
import pytest

from slamrecog.config import PipelineConfig
from slamrecog.evalkit.synth import SceneSpec, generate_scene


@pytest.fixture(scope="session")
def small_scene():
    """A short generated scene shared by the slower tests."""
    return generate_scene(SceneSpec(n_frames=8, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    """Reduced descriptor layout so end-to-end tests stay fast."""
    return PipelineConfig(vocab_k=8, pyramid=(1, 2), pca_samples=20000, vocab_samples=20000,
                          kmeans_max_iter=30, epochs=5)


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
