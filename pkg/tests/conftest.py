import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from statdetect.data import synth_digits
from statdetect.models import TrainConfig, train

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (criterion id, passed, detail) appended by tests/test_acceptance.py
CRITERIA: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid, ok, detail in sorted(CRITERIA, key=lambda c: int(c[0])):
        terminalreporter.write_line(f"criterion {cid:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def digits_small():
    return synth_digits(30, seed=11)


@pytest.fixture(scope="session")
def digits_mlp(digits_small):
    return train("mlp", digits_small, TrainConfig(epochs=30, hidden=(32,), seed=1))


@pytest.fixture(scope="session")
def digits_logreg(digits_small):
    return train("logreg", digits_small, TrainConfig(epochs=30, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
