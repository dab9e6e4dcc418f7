import numpy as np
import pytest

from uattr.datasets import DatasetSpec, PlantedGroup, generate
from uattr.diffusion import DiffusionConfig, init_params
from uattr.fisher import estimate_fisher
from uattr.trainer import TrainConfig, train

# criterion id -> (passed, detail); filled by test_acceptance, printed at session end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def dcfg():
    return DiffusionConfig()


@pytest.fixture(scope="session")
def small_ds():
    groups = (PlantedGroup(0, 0, 4, 0.0), PlantedGroup(1, 1, 3, 0.1))
    return generate(DatasetSpec(n=48, planted_groups=groups, seed=3))


@pytest.fixture(scope="session")
def small_model(small_ds, dcfg):
    """Briefly trained model on the small dataset plus its Fisher."""
    theta = train(small_ds, TrainConfig(epochs=8, batch_size=16), dcfg).theta
    F = estimate_fisher(small_ds, theta, 512, 11, dcfg)
    return theta, F


@pytest.fixture(scope="session")
def random_theta(dcfg):
    return init_params(dcfg, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
