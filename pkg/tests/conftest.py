import os

import numpy as np
import pytest

from pointlk import featnet, trainer

CACHE_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), ".cache")


def random_net(seed, widths=featnet.DEFAULT_WIDTHS):
    """Kaiming net with non-trivial biases and batch-norm statistics."""
    rng = np.random.default_rng(seed)
    net = featnet.init_net(widths, seed=seed)
    for layer in net.layers:
        out = layer.A.shape[0]
        layer.b = rng.normal(0, 0.3, out)
        layer.bn_scale = rng.uniform(0.5, 1.5, out)
        layer.bn_shift = rng.normal(0, 0.2, out)
        layer.bn_mean = rng.normal(0, 0.3, out)
        layer.bn_var = rng.uniform(0.5, 2.0, out)
    net.touch()
    return net


@pytest.fixture
def small_net():
    return random_net(0, widths=(3, 16, 32, 64))


@pytest.fixture(scope="session")
def desk():
    """The desk-scale trained model and its training metadata (cached between runs)."""
    return trainer.desk_model(CACHE_DIR)


@pytest.fixture(scope="session")
def trained_model(desk):
    return desk[0]


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
