from __future__ import annotations

import numpy as np
import pytest

from elastoray.medium import MediumModel, canonical_config


@pytest.fixture(scope="session")
def canonical():
    return canonical_config()


@pytest.fixture(scope="session")
def constant_medium():
    """cp = 1, cs = 0.4, rho = 1."""
    return MediumModel.from_speeds("1", "0.4", "1", name="constant")


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)

