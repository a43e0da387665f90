import numpy as np
import pytest
from hypothesis import settings

from hypoips.model_core import get_model
from hypoips.simulator import ExperimentDesign, simulate_ips

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")

FHN_TRUE = np.array([0.2, 0.8, 1.5, 2.0, 0.5])
LANGEVIN_TRUE = np.array([2.0, 1.5, 2.0, 0.5])
MFOU_TRUE = np.array([0.5, 1.0, 0.7])


@pytest.fixture(scope="session")
def fhn():
    return get_model("ifhn")


@pytest.fixture(scope="session")
def langevin():
    return get_model("ilangevin1d")


@pytest.fixture(scope="session")
def mfou():
    return get_model("mfou")


def small_dataset(model, theta, N=6, n=60, T=0.6, seed=11, replicate=0, fine_step=0.001):
    return simulate_ips(model, theta, ExperimentDesign(N=N, n=n, T=T, fine_step=fine_step, seed=seed),
                        replicate=replicate)


@pytest.fixture(scope="session")
def fhn_small(fhn):
    return small_dataset(fhn, FHN_TRUE, N=10, n=50, T=0.5)


@pytest.fixture(scope="session")
def langevin_small(langevin):
    return small_dataset(langevin, LANGEVIN_TRUE, N=8, n=80, T=0.8)


@pytest.fixture(scope="session")
def mfou_small(mfou):
    return small_dataset(mfou, MFOU_TRUE, N=8, n=80, T=0.8)


# one summary line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
