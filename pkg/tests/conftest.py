import pytest

from cloudcraft.config import load_config
from cloudcraft.domain import ManualClock, Store


@pytest.fixture(scope="session")
def config():
    return load_config(env={})


@pytest.fixture(scope="session")
def profiles(config):
    return config.profiles()


@pytest.fixture
def clock():
    return ManualClock()


@pytest.fixture
def store():
    s = Store()
    yield s
    s.close()


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
