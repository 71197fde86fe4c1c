import numpy as np
import pytest

from stealthprobe.scenarios import builtin_systems


@pytest.fixture(scope="session")
def builtins():
    return builtin_systems()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
