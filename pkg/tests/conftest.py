"""Shared fixtures: the standard benchmark scene, noiseless and noisy.

Scene generators are re-invoked where a test needs the frames themselves
(simulation is cheap and deterministic); only the estimator runs are cached
for the session. The acceptance tests append one line per criterion to
`acceptance_log`; a terminal-summary hook prints them at the end of the run
so the pass/fail table is visible even with output capture on.
"""

import pytest

from flowvel.config import standard_scene
from flowvel.evaluate import run_estimator
from flowvel.geometry import build_angle_grid
from flowvel.simulate import simulate

_acceptance_lines: list[str] = []


@pytest.fixture(scope="session")
def std_cfg():
    return standard_scene()


@pytest.fixture(scope="session")
def std_cfg_noisy():
    return standard_scene(noisy=True)


@pytest.fixture(scope="session")
def std_grid(std_cfg):
    return build_angle_grid(std_cfg.intrinsics())


@pytest.fixture(scope="session")
def noiseless_run(std_cfg, std_grid):
    return run_estimator(
        simulate(std_cfg.plan()), std_grid,
        std_cfg.estimator_config(collect_diagnostics=True),
        collect_fields=True,
    )


@pytest.fixture(scope="session")
def noisy_run(std_cfg_noisy, std_grid):
    return run_estimator(
        simulate(std_cfg_noisy.plan()), std_grid, std_cfg_noisy.estimator_config()
    )


@pytest.fixture(scope="session")
def acceptance_log():
    return _acceptance_lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
