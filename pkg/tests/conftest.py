import numpy as np
import pytest

from decsr import simplicial as S
from decsr.problems.elastica import elastica_dataset
from decsr.problems.elasticity import elasticity_dataset
from decsr.problems.poisson import poisson_dataset


@pytest.fixture(scope="session")
def square_mesh():
    return S.unit_square_mesh(230, seed=7)


@pytest.fixture(scope="session")
def small_square_mesh():
    return S.unit_square_mesh(64, seed=5)


@pytest.fixture(scope="session")
def elasticity_mesh():
    return S.unit_square_mesh(142, seed=3)


@pytest.fixture(scope="session")
def rod_mesh():
    return S.interval_mesh(11)


@pytest.fixture(scope="session")
def poisson_problem(square_mesh):
    return poisson_dataset(square_mesh, split_seed=0)


@pytest.fixture(scope="session")
def elastica_problem(rod_mesh):
    """Default noisy rod dataset (continuous pipeline, decade-rule noise)."""
    return elastica_dataset(rod_mesh, noise_seed=0)


@pytest.fixture(scope="session")
def elastica_clean_problem(rod_mesh):
    """Noiseless dataset from exact solutions of the discrete model."""
    return elastica_dataset(rod_mesh, noise=0.0)


@pytest.fixture(scope="session")
def elasticity_problem(elasticity_mesh):
    return elasticity_dataset(elasticity_mesh, split_seed=0)


@pytest.fixture(scope="session")
def elasticity_untyped_problem(elasticity_mesh):
    return elasticity_dataset(elasticity_mesh, split_seed=0, untyped=True)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
