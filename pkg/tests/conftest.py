import pytest

from srtkit.design import builtin_percs, builtin_percs_ab, two_arm_design


@pytest.fixture
def percs():
    return builtin_percs()


@pytest.fixture
def percs_ab():
    return builtin_percs_ab()


@pytest.fixture
def two_arm():
    return two_arm_design()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
