import numpy as np
import pytest

from coherent_cast import hierarchy


@pytest.fixture
def fig1():
    return hierarchy.fig1()


@pytest.fixture
def three():
    return hierarchy.from_parent_map([("T", None), ("A", "T"), ("B", "T")])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
