import numpy as np
import pytest

from snbench.dataset import generate_dataset
from snbench.space import DEFAULT_EDGE_VOCAB, Family, define_space


@pytest.fixture(scope="session")
def tiny_node_space():
    """Two intermediate nodes, two ops: 71 connected encodings."""
    return define_space(Family.NODE_OP_CONCAT, 2, ("conv3x3", "avgpool3x3"))


@pytest.fixture(scope="session")
def small_node_space():
    return define_space(Family.NODE_OP_CONCAT, 2, ("conv3x3", "conv1x1", "avgpool3x3"))


@pytest.fixture(scope="session")
def tiny_edge_space():
    """Three op edges over three ops: 27 encodings."""
    return define_space(Family.EDGE_OP_SUM, 1, ("zeroize", "skip", "conv3x3"))


@pytest.fixture(scope="session")
def full_edge_space():
    return define_space(Family.EDGE_OP_SUM, 2, DEFAULT_EDGE_VOCAB)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(seed=3, n_train=160, n_test=64, noise=1.0)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
