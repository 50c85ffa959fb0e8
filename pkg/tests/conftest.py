import sys

import numpy as np
import pytest

from ptdfcont import bvp
from ptdfcont.model import PendulumParams


@pytest.fixture(scope="session")
def params():
    return PendulumParams.default()


@pytest.fixture(scope="session")
def start_orbit(params):
    p = 0.02
    return bvp.solve_orbit(bvp.settle_rotation(params, p), p, params)


@pytest.fixture(scope="session")
def oracle(start_orbit):
    """Oracle branch from p = 2 cm through the fold, with the refined fold."""
    branch = bvp.continue_branch_bvp(
        start_orbit, bvp.BvpContinuationSettings(phase_min=start_orbit.avg_phase - 3.5)
    )
    p0, fold = bvp.locate_fold(branch)
    return branch, p0, fold


@pytest.fixture(scope="session")
def interp(oracle):
    return bvp.BranchInterpolator(oracle[0])


@pytest.fixture(scope="session")
def fold_orbit(oracle):
    return oracle[2]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
