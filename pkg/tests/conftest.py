import pytest

from dpabc.mechanisms import PrivacyBudget, make_epsilon_laplace
from dpabc.model import PrivatizedQuery, gamma_poisson_model
from dpabc.oracle_gp import COUNT_SETTING, true_posterior_grid

_CRITERIA: list[str] = []


def record_criterion(line: str) -> None:
    _CRITERIA.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def setting():
    return COUNT_SETTING


@pytest.fixture(scope="session")
def model():
    return gamma_poisson_model(25.0, 1.0)


@pytest.fixture(scope="session")
def mech():
    return make_epsilon_laplace(PrivacyBudget(0.2), 1.0)


@pytest.fixture(scope="session")
def query(mech):
    return PrivatizedQuery.from_mechanism(37.4, mech)


@pytest.fixture(scope="session")
def truth(setting):
    return true_posterior_grid(setting)
