import os
import sys

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from shellflow.config import SimConfig, TrajectoryKind  # noqa: E402
from shellflow.datagen import generate, make_sheet, trajectory  # noqa: E402
from shellflow.shell_sim import build_model  # noqa: E402


def _central_difference(fn, x: np.ndarray, direction: np.ndarray, h: float = 1e-6) -> float:
    return (fn(x + h * direction) - fn(x - h * direction)) / (2.0 * h)


@pytest.fixture
def central_difference():
    """Directional central difference of a scalar function."""
    return _central_difference


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sheet5():
    """5 x 5 sheet (K = 25) with its two grasped top corners."""
    return make_sheet(5)


@pytest.fixture(scope="session")
def sheet4():
    return make_sheet(4)


@pytest.fixture(scope="session")
def sim_config():
    return SimConfig()


@pytest.fixture(scope="session")
def model5(sheet5, sim_config):
    mesh, grasp = sheet5
    return build_model(mesh, sim_config, grasp)


@pytest.fixture(scope="session")
def dataset5(sheet5, sim_config):
    """20 simulated frames of the 5 x 5 sheet swinging along +X."""
    mesh, grasp = sheet5
    targets = trajectory(TrajectoryKind.PLUS_X, mesh.vertices[grasp], 0.05, 0.5, 20, sim_config.dt)
    return generate(mesh, grasp, sim_config, targets, 20, seed=0, provenance={"name": "sheet5"})
