import numpy as np
import pytest

from imexnse.spectral import SpectralBackend

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def backend():
    return SpectralBackend(32)


@pytest.fixture(scope="session")
def small_backend():
    return SpectralBackend(16)


def random_velocity(backend, rng, solenoidal=True, dealiased=True):
    """Real random velocity field as coefficients (Hermitian by construction)."""
    phys = rng.standard_normal((2,) + backend.grid.shape)
    v = backend.to_spectral(phys)
    v[:, 0, 0] = 0.0
    if dealiased:
        v = v * backend.grid.dealias_mask
    if solenoidal:
        v = backend.leray_project(v)
    return v


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def acceptance_report():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
