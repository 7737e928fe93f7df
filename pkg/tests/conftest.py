import numpy as np
import pytest
from hypothesis import settings

from cyclewalk.env_model import (CycleCatalog, CycleShape, WeightLaw, nn_two_cycles, plaquette_plus_nn,
                                 plaquette_rotations, sample_environment)

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def one_d_catalog(low=1.0, high=2.0):
    """Edge {x, x+1} carries the i.i.d. weight of the back-and-forth cycle based at x."""
    return CycleCatalog([CycleShape(((1,), (-1,))), CycleShape(((-1,), (1,)))],
                        [WeightLaw.uniform(low, high), WeightLaw.constant(0.0)])


@pytest.fixture(scope="session")
def srw_env():
    return sample_environment(nn_two_cycles(2, WeightLaw.constant(0.5)), 2, 16, 0)


@pytest.fixture(scope="session")
def plaquette_env():
    return sample_environment(plaquette_rotations(2, WeightLaw.uniform(0.05, 0.45)), 2, 16, 2)


@pytest.fixture(scope="session")
def mixed_env():
    cat = plaquette_plus_nn(2, WeightLaw.lognormal(0.0, 1.0), WeightLaw.uniform(0.1, 1.0))
    return sample_environment(cat, 2, 12, 11)


@pytest.fixture(scope="session")
def rough_env():
    """Heavy-tailed plaquettes plus small nearest-neighbour weights on a 40-torus."""
    cat = plaquette_plus_nn(2, WeightLaw.lognormal(0.0, 1.0), WeightLaw.uniform(0.1, 1.0))
    return sample_environment(cat, 2, 40, 3)


def random_field(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)
