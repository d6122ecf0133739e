import numpy as np
import pytest

from tubewalk.contraction import synthesize_ccm
from tubewalk.rom import RobotParams
from tubewalk.terrain import (
    KernelConfig,
    TerrainSpec,
    fit_gp,
    generate_terrain,
    sample_observations,
    split_observations,
)

X_BOX = (-0.25, 0.25)
TAU_BOX = (-20.0, 20.0)


@pytest.fixture(scope="session")
def params():
    return RobotParams()


@pytest.fixture(scope="session")
def ccm(params):
    return synthesize_ccm(params, 12.0, None, X_BOX, TAU_BOX)


@pytest.fixture(scope="session")
def hilly_setup():
    """Hilly 10 m map at the 2500-cell / 700-sample / 490-210 scale."""
    grid = generate_terrain(TerrainSpec(style="hilly", seed=7))
    obs = sample_observations(grid, 700, 0.01, seed=1)
    train, cal = split_observations(obs, 0.7, seed=1)
    gp = fit_gp(train, KernelConfig(), 1e-4)
    return grid, obs, train, cal, gp


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one line per acceptance criterion; printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
