import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from wildflow.field3 import Grid3

settings.register_profile(
    "wildflow",
    deadline=None,
    max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("wildflow")


@pytest.fixture(scope="session")
def g16():
    return Grid3(16)


@pytest.fixture(scope="session")
def g32():
    return Grid3(32)


def random_band_limited(grid: Grid3, shape: tuple, kmax: int, seed: int) -> np.ndarray:
    """Real random field with Fourier support in ``|k|_inf <= kmax``."""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(shape + grid.spectral_shape) + 1j * rng.standard_normal(shape + grid.spectral_shape)
    k1, k2, k3 = grid.k
    mask = (np.abs(k1) <= kmax) & (np.abs(k2) <= kmax) & (np.abs(k3) <= kmax)
    u = grid.ifft(np.where(mask, c, 0.0))
    return u / np.abs(u).max()


def pytest_terminal_summary(terminalreporter):
    lines = getattr(sys.modules.get("test_acceptance"), "REPORT", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
