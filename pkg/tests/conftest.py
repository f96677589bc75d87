import numpy as np
import pytest

from parareal_lab.services.hamiltonian import FpuSystem, HarmonicSystem, fpu_test_state


@pytest.fixture
def fpu():
    return FpuSystem(m=3, omega=300.0)


@pytest.fixture
def fpu50():
    return FpuSystem(m=3, omega=50.0)


@pytest.fixture
def harmonic():
    return HarmonicSystem(d=2, stiffness=4.0, mass=1.0)


@pytest.fixture
def u_test(fpu):
    return fpu_test_state(3, 300.0)


@pytest.fixture
def u_test50():
    return fpu_test_state(3, 50.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(autouse=True)
def no_registry(monkeypatch, tmp_path):
    #keep test runs out of the default registry file
    monkeypatch.setenv("RUNS_DATABASE_URL", f"sqlite:///{tmp_path / 'registry.db'}")
