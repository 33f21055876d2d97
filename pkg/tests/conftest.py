"""Shared fixtures.  The long controlled runs are computed once per session."""

from __future__ import annotations

import time

import numpy as np
import pytest

from vmg.attractor import find_stall_wave, find_surge_cycle
from vmg.control import basic_controller, baseline_surrogate
from vmg.model import CompressorParams, design_equilibrium
from vmg.solver import SolverConfig, integrate

LOW_GAMMA = 0.4          # stall is settled here
SURGE_GAMMA = 0.5        # surge cycle lives here
TARGET_GAMMA = 0.65      # high-pressure design point to recover
GAMMA1 = 0.765           # 1.02 x first stall-free scanned gamma (0.75)
CONTROL_GRID = 64

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def params():
    return CompressorParams()


@pytest.fixture(scope="session")
def target(params):
    return design_equilibrium(params, TARGET_GAMMA)


@pytest.fixture(scope="session")
def stall_wave(params):
    return find_stall_wave(params, LOW_GAMMA, 0.3, CONTROL_GRID)


@pytest.fixture(scope="session")
def surge_cycle(params):
    return find_surge_cycle(params, SURGE_GAMMA)


def _controlled_run(params, state, law, t_end):
    cfg = SolverConfig(n_grid=CONTROL_GRID, t_end=t_end, record_every=10)
    start = time.perf_counter()
    traj = integrate(params, state, law, cfg)
    return traj, law, time.perf_counter() - start


@pytest.fixture(scope="session")
def stall_basic_run(params, stall_wave):
    law = basic_controller(params, GAMMA1, TARGET_GAMMA)
    return _controlled_run(params, stall_wave.state(), law, 1500.0)


@pytest.fixture(scope="session")
def stall_surrogate_run(params, stall_wave):
    law = baseline_surrogate(params, TARGET_GAMMA, 5.0)
    return _controlled_run(params, stall_wave.state(), law, 1500.0)


@pytest.fixture(scope="session")
def surge_basic_run(params, surge_cycle):
    law = basic_controller(params, GAMMA1, TARGET_GAMMA)
    return _controlled_run(params, surge_cycle.state(CONTROL_GRID, 0), law, 2000.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def surge_surrogate_run(params, surge_cycle):
    law = baseline_surrogate(params, TARGET_GAMMA, 5.0)
    return _controlled_run(params, surge_cycle.state(CONTROL_GRID, 0), law, 2000.0)
