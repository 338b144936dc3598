import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from volterra_mp.forward import solve_fsvie
from volterra_mp.martingale import make_backend
from volterra_mp.problem import ControlProcess
from volterra_mp.timebase import make_grid, sample_noise

# acceptance lines collected by test_acceptance and printed in the summary
ACCEPTANCE = {}


def record(criterion: str, passed: bool, detail: str):
    ACCEPTANCE[criterion] = f"{criterion}: {'PASS' if passed else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split("-")[1])):
            terminalreporter.write_line(ACCEPTANCE[key])


def tree_setup(problem, N, u=0.0):
    """Grid, full tree ensemble, control, reference state and backend."""
    grid = make_grid(problem.T, N)
    noise = sample_noise(grid, 2**N, "tree")
    if np.ndim(u) == 0:
        ctrl = ControlProcess.constant(np.full(problem.m, float(u)), N)
    else:
        ctrl = ControlProcess.deterministic(np.asarray(u, float).reshape(N, problem.m))
    X = solve_fsvie(problem, grid, noise, ctrl).values
    return grid, noise, ctrl, X, make_backend(noise)


@pytest.fixture
def tree():
    return tree_setup
