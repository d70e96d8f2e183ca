import numpy as np
import pytest

from cednet_lab.graph import ArchConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    # small enough for 64-bit finite differences at 32x32
    return ArchConfig(channels=(4, 8, 8, 12), blocks=(1, 1, 1, 1), stages=2, style="fpn")


@pytest.fixture
def toy_config():
    return ArchConfig(channels=(16, 32, 48, 64), blocks=(1, 1, 1, 1), stages=2, style="fpn")
