import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gazelab import data, models

settings.register_profile(
    "lab", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("lab")

# Shared toy world: 10 persons x 50 samples, person 0 held out.
DATA_SEED, N_PERSONS, PER_PERSON, HELD_OUT = 7, 10, 50, 0
TRAIN_SEED = 1

_ACCEPTANCE = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[k])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def world():
    ds = data.generate(DATA_SEED, N_PERSONS, PER_PERSON)
    train, fold = data.split_leave_one_person_out(ds, HELD_OUT)
    return ds, train, fold


@pytest.fixture(scope="session")
def init_model():
    return models.build_model("single_input_cnn", 0)


@pytest.fixture(scope="session")
def trained(world, init_model):
    _, train, _ = world
    return models.train(init_model, train, models.TrainConfig(seed=TRAIN_SEED))


@pytest.fixture(scope="session")
def small_set():
    return data.generate(3, 3, 8)
