import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kgreduce.fourier_core import LatticeBox
from kgreduce.reduction_pipeline import KGCoefficients, run_pipeline, select_reference_omega

settings.register_profile("default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

REF_BOX = LatticeBox(1, 8, 12)
REF_EPS = 1e-3


@pytest.fixture(scope="session")
def ref_box():
    return REF_BOX


@pytest.fixture(scope="session")
def ref_coeffs():
    return KGCoefficients.reference(REF_BOX, REF_EPS)


@pytest.fixture(scope="session")
def ref_omega():
    return select_reference_omega(REF_BOX, 1.0, 0.01)


@pytest.fixture(scope="session")
def ref_result(ref_coeffs, ref_omega):
    return run_pipeline(ref_coeffs, ref_omega, tol=1e-40, max_steps=5)


@pytest.fixture
def rng():
    return np.random.default_rng(20261016)
