import numpy as np
import pytest

from simcache.costs import CostModel
from simcache.spaces import FiniteSpace

INF = float("inf")


def toy_matrix():
    """4-object catalog where only the chain 0-1-2 has finite cross costs.

    Objects 0..3; C_a(0,1)=C_a(1,0)=C_a(1,2)=C_a(2,1)=1/16, every other
    off-diagonal pair is infinite.  With rates (3/8, 1/8, 3/8, 1/8) and
    retrieval cost 1 the instance has two swap-local optima: {1,3} with
    expected cost 6/128 (global) and {0,2} with 17/128.
    """
    m = np.full((4, 4), INF)
    np.fill_diagonal(m, 0.0)
    m[0, 1] = m[1, 0] = m[1, 2] = m[2, 1] = 1.0 / 16.0
    return m


@pytest.fixture
def toy_space():
    return FiniteSpace(toy_matrix())


@pytest.fixture
def toy_rates():
    return np.array([3 / 8, 1 / 8, 3 / 8, 1 / 8])


@pytest.fixture
def toy_cm():
    return CostModel(retrieval_cost=1.0)
