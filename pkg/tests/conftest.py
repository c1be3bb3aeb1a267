import numpy as np
import pytest

from swayid import dynamics, stimulus


@pytest.fixture(scope="session")
def canonical_tilt():
    """Default stimulus on the 1 ms integration grid."""
    return stimulus.generate_prts(stimulus.PrtsConfig(), 0.001)


@pytest.fixture(scope="session")
def table1_means():
    return dynamics.DecParams(
        kp=811.2951, kd=284.5640, kp_pass=312.2075, kd_pass=174.3144,
        nv=0.4695, theta=0.0003, delta=0.1210,
    )


@pytest.fixture(scope="session", autouse=True)
def warm_jit(canonical_tilt):
    """Compile the simulation kernel once so timed tests measure compute."""
    params = dynamics.DecParams(800.0, 280.0, 300.0, 170.0, 0.0, 0.001, 0.1)
    cfg = dynamics.SimConfig(duration=1.0)
    dynamics.simulate(params, dynamics.BodyParams(), canonical_tilt[:1000], cfg)
