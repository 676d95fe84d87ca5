import numpy as np
import pytest

from semicausal.core import Dataset, DiscreteDistribution
from semicausal.oracle import random_distribution


def make_data(n, seed=0, d=1):
    """Logistic treatment, linear outcome in each arm, Gaussian noise."""
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, d))
    pi = 1.0 / (1.0 + np.exp(-(0.4 * L[:, 0] - 0.2)))
    A = (rng.uniform(size=n) < pi).astype(float)
    Y = 1.0 + L.sum(axis=1) + A * (1.0 + 0.5 * L[:, 0]) + rng.normal(size=n)
    return Dataset(L, A, Y)


@pytest.fixture
def data200():
    return make_data(200, seed=11)


@pytest.fixture
def small_base():
    """Two covariate levels, binary outcome: 8 atoms with hand-chosen masses."""
    level_mass = {0.0: 0.4, 1.0: 0.6}
    prop = {0.0: 0.3, 1.0: 0.7}
    p_y1 = {(0.0, 0): 0.2, (0.0, 1): 0.5, (1.0, 0): 0.4, (1.0, 1): 0.9}
    L, A, Y, P = [], [], [], []
    for l, ml in level_mass.items():
        for a in (0, 1):
            arm = prop[l] if a else 1 - prop[l]
            for y in (0.0, 1.0):
                q = p_y1[(l, a)] if y == 1.0 else 1 - p_y1[(l, a)]
                L.append([l])
                A.append(a)
                Y.append(y)
                P.append(ml * arm * q)
    return DiscreteDistribution(np.array(L), A, Y, P)


@pytest.fixture(params=[0, 1, 2, 3, 4])
def random_base(request):
    return random_distribution(1000 + request.param, n_levels=2, n_outcomes=3)
