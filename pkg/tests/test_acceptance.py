"""Four-hour closed-loop scenarios on the reference loads.

Each run takes tens of seconds; select with ``pytest -m acceptance``.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from loads.catalog import read_loads
from scheduler.receding import receding_horizon_run
from simulation.forecast import gen_solar_curve
from simulation.trace import first_in_band_time
from switching.history import check_dwell_times
from utils.config import load_run_config

from .conftest import CONFIG_DIR

pytestmark = pytest.mark.acceptance

_RUNS: dict = {}


def _run(soc_init: float = 0.5, *, unconstrained: bool = False, workers: int = 0):
    key = (soc_init, unconstrained, workers)
    if key not in _RUNS:
        cfg = load_run_config(CONFIG_DIR / "run_solar_50.json")
        battery = dataclasses.replace(cfg.battery, c2=0.0, c3=0.0, c4=0.0) if unconstrained else cfg.battery
        syn = cfg.synthetic
        forecast = gen_solar_curve(syn.duration_s, syn.peak_pu, syn.seed, syn.noise_level)
        _RUNS[key] = receding_horizon_run(
            forecast,
            read_loads(cfg.loads_path),
            battery,
            cfg.horizon,
            soc_init=soc_init,
            workers=workers,
            step_budget_s=cfg.step_budget_s,
        )
    return _RUNS[key]


def test_soc_and_power_stay_within_bounds():
    solution = _run(0.5)
    trace = solution.trace
    assert trace.n_steps == 240
    assert trace.soc.min() >= 0.10
    assert trace.soc.max() <= 0.90
    assert solution.battery.p_norm * np.abs(trace.e_pu).max() < 1.0


def test_dropping_soc_barriers_overcharges():
    assert _run(0.5, unconstrained=True).trace.soc.max() > 0.90


@pytest.mark.parametrize("soc_init", [0.10, 1.00])
def test_extreme_initial_charge_is_recovered(soc_init):
    solution = _run(soc_init)
    trace = solution.trace
    entered = first_in_band_time(trace.t_s, trace.soc, 0.10, 0.90)
    assert entered is not None
    assert entered <= 0.25 * trace.n_fine * trace.fine_dt_s

    reference = _run(0.5).trace
    first_hour = slice(0, 60)
    assert not np.array_equal(trace.applied[first_hour], reference.applied[first_hour])


@pytest.mark.parametrize("soc_init,unconstrained", [(0.5, False), (0.5, True), (0.10, False), (1.00, False)])
def test_applied_switching_respects_dwell(soc_init, unconstrained):
    solution = _run(soc_init, unconstrained=unconstrained)
    assert check_dwell_times(solution.trace.applied, solution.dwell_steps) == []


def test_step_time_within_soft_budget():
    trace = _run(0.5).trace
    median = float(np.median(trace.step_wall_time_s))
    assert median <= 3 * 0.3
    assert trace.step_wall_time_s.sum() <= 3 * 70.0


def test_single_worker_reproduces_parallel_run():
    parallel = _run(0.5).trace
    serial = _run(0.5, workers=1).trace
    assert np.array_equal(parallel.applied, serial.applied)
    assert np.array_equal(parallel.soc, serial.soc)
    assert np.array_equal(parallel.load_power_pu, serial.load_power_pu)
