import numpy as np
import pytest

from switchfermi.charts import Charts
from switchfermi.model import SlitProfile, default_setup, derive_params, normal_form_constants

ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def default():
    return default_setup()


@pytest.fixture(scope="session")
def large_omega():
    return default_setup(fdot=40.0)


@pytest.fixture(scope="session")
def static():
    prof = SlitProfile.constant(0.5)
    params = derive_params(prof, 0.5, 0.25)
    return prof, params, normal_form_constants(params, prof)


@pytest.fixture(scope="session")
def default_charts(default):
    prof, params, _ = default
    return Charts(params, prof)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def record_acceptance(k, passed, detail):
    line = f"criterion {k:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
