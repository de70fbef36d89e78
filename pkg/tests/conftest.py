import numpy as np
import pytest

from cvfe_ions.mesh import Mesh, build_rect_mesh, compute_operators


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def unit_triangle():
    return Mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))


@pytest.fixture
def unit_tet():
    return Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]), np.array([[0, 1, 2, 3]]))


@pytest.fixture(scope="session")
def test1_base():
    return build_rect_mesh(32, 4, ((0.0, 1.0), (0.0, 0.1)))


@pytest.fixture(scope="session")
def test1_base_ops(test1_base):
    return compute_operators(test1_base)
