import numpy as np
import pytest

from eatlab.netcore import Dense, Network, init_network


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def linear_net(w, b=(0.0, 0.0)):
    """Two-class linear model whose logit difference is w . x + (b0 - b1)."""
    w = np.asarray(w, dtype=np.float64)
    weights = np.stack([w, np.zeros_like(w)], axis=1)
    return Network([Dense(weights, np.asarray(b, dtype=np.float64), "identity")])


def small_net(d=6, hidden=8, classes=3, activation="relu", seed=0):
    return init_network([d, hidden, hidden, classes], activation, seed=seed)
