import copy
import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from radargrid.config import EngineConfig, build
from radargrid.grid_manager import UnifyState
from radargrid.io import bundled_scenario_path, load_scenario, scenario_from_dict

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = {}


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion for the terminal summary."""
    def add(criterion, ok, detail):
        ACCEPTANCE[criterion] = (bool(ok), detail)
        print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} {detail}")
    return add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for c in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[c]
        terminalreporter.write_line(f"criterion {c:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def bundled_raw(name):
    return copy.deepcopy(load_scenario(bundled_scenario_path(name))[1])


def engine_for(scenario, mode=None, representation=None, **velocity_params):
    cfg = build(EngineConfig, scenario.engine)
    if mode is not None:
        cfg = dataclasses.replace(cfg, mode=mode)
    if representation is not None:
        cfg = dataclasses.replace(cfg, occupancy=dataclasses.replace(cfg.occupancy, representation=representation))
    if velocity_params:
        vp = dataclasses.replace(cfg.velocity.params, **velocity_params)
        cfg = dataclasses.replace(cfg, velocity=dataclasses.replace(cfg.velocity, params=vp))
    return cfg


def run_scenario(scenario, cfg, seed=None, on_cycle=None):
    """Step a fresh state over every scan; ``on_cycle(state, pose, scan, report)`` is called after each."""
    state = None
    reports = []
    for pose, scan in scenario.run(seed):
        if state is None:
            state = UnifyState(cfg, pose)
        rep = state.step(pose, scan)
        reports.append(rep)
        if on_cycle is not None:
            on_cycle(state, pose, scan, rep)
    return state, reports


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def corridor():
    return scenario_from_dict(bundled_raw("static-corridor"))
