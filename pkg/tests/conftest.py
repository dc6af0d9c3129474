import numpy as np
import pytest


def rand_spd(rng, p, scale=1.0):
    """Random well-conditioned SPD matrix."""
    a = rng.standard_normal((p, 2 * p))
    return scale * (a @ a.T) / (2 * p) + 0.1 * np.eye(p)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
