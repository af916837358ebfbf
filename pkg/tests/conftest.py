import pytest

from lipsmooth.geometry import make_shape
from lipsmooth.partition import Partition


@pytest.fixture(scope="session")
def disk():
    return make_shape("disk")


@pytest.fixture(scope="session")
def disk_partition(disk):
    return Partition(disk)


@pytest.fixture(scope="session")
def square():
    return make_shape("square")


def pytest_terminal_summary(terminalreporter):
    from _acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
