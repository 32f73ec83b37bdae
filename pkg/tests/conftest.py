import numpy as np
import pytest

from hsiplastic.cube_io import CalibrationState, SpectralCube


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cube(rng, h=5, w=7, b=4, state=CalibrationState.REFLECTANCE, scale=1.0):
    data = (rng.random((b, h, w)) * scale).astype(np.float32)
    wl = np.linspace(660.0, 1700.0, b)
    return SpectralCube(data, wl, state=state)
