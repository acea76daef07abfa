import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mfg_decode.forward import MFGProblem, RunningCost, solve_stationary  # noqa: E402
from mfg_decode.grid import Grid, MetricField  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def small_problem(n=33, n_time=32, cost=True) -> MFGProblem:
    grid = Grid.unit(n, n_time=n_time)
    x = grid.axes[0]
    metric = MetricField.euclidean(grid, 1 + 0.5 * np.sin(2 * np.pi * x))
    state = solve_stationary(grid, metric, (np.array([0.0, 0.6]), np.array([1.0, 0.7])))
    coeffs = {2: np.sin(np.pi * x), 3: np.cos(np.pi * x)} if cost else {}
    return MFGProblem(grid, metric, RunningCost(state.m0, coeffs), state)


@pytest.fixture
def problem():
    return small_problem()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
