import numpy as np
import pytest

from cispgm.dynamics import SystemParams


@pytest.fixture(scope="session")
def params() -> SystemParams:
    return SystemParams()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(20260810))


def make_rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))
