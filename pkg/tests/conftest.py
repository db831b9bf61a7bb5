import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def separated_uniform(rng, n, min_gap=0.01):
    """Uniform sample on [0, 1] with adjacent gaps at least ``min_gap``.

    Plain float distinctness is not enough for a solver running at a
    fixed finite regularization to resolve neighbours, so 'distinct
    entries' is enforced as a minimum separation.
    """
    while True:
        x = rng.uniform(0.0, 1.0, n)
        if np.diff(np.sort(x)).min() >= min_gap:
            return x
