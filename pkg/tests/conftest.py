import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))

from bath_fit import BathSpec, CorrelationFit, fit_correlation  # noqa: E402
from dynamics import ExtendedState, IntegratorControls, equilibrate  # noqa: E402

REFERENCE_BATH = BathSpec(xi=0.1, omega_c=7.5, beta=10.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def controls():
    return IntegratorControls(rtol=1e-9, atol=1e-12, max_step=0.5, steps_per_period=50)


@pytest.fixture(scope="session")
def closed_fit():
    """Zero-amplitude kernel: the qubit evolves unitarily."""
    return CorrelationFit(np.zeros(1), -np.ones(1), 0.0, 30.0, 0, BathSpec(xi=0.0, omega_c=7.5, beta=10.0))


@pytest.fixture(scope="session")
def toy_fit():
    """Two damped terms with positive relaxation rates at the qubit frequency."""
    return CorrelationFit(np.array([0.2 + 0.0j, 0.05 + 0.02j]), np.array([-2.0 + 0.0j, -5.0 + 1.0j]),
                          0.0, 30.0, 0, REFERENCE_BATH)


@pytest.fixture(scope="session")
def toy_equilibrium(toy_fit, controls):
    return equilibrate(toy_fit, 1e-9, 2000.0, controls=controls)


@pytest.fixture(scope="session")
def reference_fit():
    return fit_correlation(REFERENCE_BATH, 100.0, 1e-7, 6, samples=4000, seed=0)


@pytest.fixture(scope="session")
def reference_equilibrium(reference_fit, controls):
    return equilibrate(reference_fit, 1e-10, 800.0, controls=controls)


def random_density(rng) -> np.ndarray:
    v = rng.normal(size=3)
    v *= rng.uniform(0, 1) / np.linalg.norm(v)
    return 0.5 * np.array([[1 + v[2], v[0] - 1j * v[1]], [v[0] + 1j * v[1], 1 - v[2]]])


def random_state(rng, n_terms: int, scale: float = 0.05) -> ExtendedState:
    aux = scale * (rng.normal(size=(n_terms, 2, 2)) + 1j * rng.normal(size=(n_terms, 2, 2)))
    return ExtendedState(random_density(rng), aux, 0.0)
