import numpy as np
import pytest

from membrane_prune import data as D
from membrane_prune import net as N


TINY_COUNTS = (6, 4, 3, 8)


def random_patches(count, seed, size=32):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, size=(count, 1, size, size))
    y = rng.integers(0, 2, size=count)
    return D.PatchDataset(x, y, "train", True)


@pytest.fixture
def tiny_net():
    return N.build(N.NetworkConfig(TINY_COUNTS), seed=7)


@pytest.fixture
def tiny_data():
    return random_patches(48, seed=11)


@pytest.fixture(scope="session")
def membrane_image():
    return D.synth_membranes(64, 64, 3, seed=5)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.SUMMARY:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(module.SUMMARY):
        terminalreporter.write_line(module.SUMMARY[number])
