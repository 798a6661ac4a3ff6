import numpy as np
import pytest

from busholding.corridor import generate_synthetic_scenario


@pytest.fixture(scope="session")
def scenario():
    return generate_synthetic_scenario(7)


@pytest.fixture(scope="session")
def empty_scenario(scenario):
    return scenario.replace(od_matrices=np.zeros_like(scenario.od_matrices))


def pytest_terminal_summary(terminalreporter):
    from helpers import acceptance_lines

    lines = acceptance_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
