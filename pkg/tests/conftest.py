import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from armctl.model import READY_Q, default_model

settings.register_profile("armctl", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("armctl")


@pytest.fixture(scope="session")
def model():
    return default_model()


@pytest.fixture(scope="session")
def gravity_free(model):
    return model.with_gravity((0.0, 0.0, 0.0))


@pytest.fixture
def ready_q():
    return np.array(READY_Q)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_q(model, rng, margin=0.05):
    lo, hi = model.limits.q_min + margin, model.limits.q_max - margin
    return rng.uniform(lo, hi)


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
