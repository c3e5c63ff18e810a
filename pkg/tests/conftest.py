import numpy as np
import pytest

from fclip import synthcat as sc


SMALL = sc.CatalogConfig(n_train=120, n_val=30, n_test=30, n_hout_c=12, n_hout_b=12, seed=3)


@pytest.fixture(scope="session")
def small_catalog():
    return sc.build_catalog(SMALL)


@pytest.fixture(scope="session")
def default_catalog():
    return sc.build_catalog(sc.CatalogConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
