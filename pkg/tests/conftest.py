import numpy as np
import pytest

from svmframe.config import settings
from svmframe.frame import FramePath
from svmframe.grid import Grid2D, PhysicalParams
from svmframe.potential import Potential, PotentialKind


@pytest.fixture
def params():
    """Natural units, M = hbar = 1 and nu = 1/2."""
    return PhysicalParams()


@pytest.fixture
def grid():
    return Grid2D.from_length(16.0, 64)


@pytest.fixture
def fine_grid():
    return Grid2D.from_length(16.0, 128)


@pytest.fixture
def harmonic():
    return Potential(kind=PotentialKind.HARMONIC, strength=1.0)


@pytest.fixture
def rotating():
    return FramePath.constant_rotation(0.5)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def no_output_override(monkeypatch):
    """Keep a SVMFRAME_OUTPUT_DIR from the developer's environment out of the tests."""
    monkeypatch.setattr(settings, "svmframe_output_dir", None)
