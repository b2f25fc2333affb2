import numpy as np
import pytest

from selfheal import (
    LogisticObjective,
    QuadraticObjective,
    build_laplacian,
    make_params,
    ring_lattice,
    solve_centralized,
    two_cluster_dataset,
)


@pytest.fixture(scope="session")
def lattice():
    return ring_lattice(7, {1, 3, 5}, 0.25)


@pytest.fixture(scope="session")
def lattice_lap(lattice):
    return build_laplacian(lattice)


@pytest.fixture(scope="session")
def quad_model():
    rng = np.random.default_rng(5)
    return QuadraticObjective(rng.normal(size=(7, 2)))


@pytest.fixture(scope="session")
def quad_x_opt(quad_model):
    return solve_centralized(quad_model)


@pytest.fixture(scope="session")
def logistic_model():
    return LogisticObjective(two_cluster_dataset())


@pytest.fixture(scope="session")
def logistic_x_opt(logistic_model):
    return solve_centralized(logistic_model)


@pytest.fixture(scope="session")
def default_params():
    return make_params(0.3, 0.5, 1.0, 0.5)
