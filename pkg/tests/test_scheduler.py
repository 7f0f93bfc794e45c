"""Candidate scoring, step optimization and the closed loop on small instances."""

from __future__ import annotations

import numpy as np
import pytest
from numpy.testing import assert_allclose

from battery.constraints import BatterySpec, soc_trajectory
from loads.model import DiscreteLoadModel, LoadSpec, simulate_switched
from scheduler.optimizer import (
    CandidateOptimizer,
    ForecastSeries,
    HorizonEvaluator,
    SchedulerError,
    cost,
    evaluate_candidate,
    optimize_step,
    resolve_workers,
    select_best,
    tracking_error,
)
from scheduler.receding import receding_horizon_run, resimulate
from switching.history import check_dwell_times
from switching.switchset import (
    CombinationSpace,
    HorizonConfig,
    LoadSwitchState,
    SwitchSchedule,
    admissible_trajectories,
)


def _setup(specs, horizon):
    dwell = horizon.validate_loads(specs)
    models = [DiscreteLoadModel.from_spec(s, horizon.fine_dt_s) for s in specs]
    states = [LoadSwitchState.initial(s.id, on, off) for s, (on, off) in zip(specs, dwell)]
    return models, states


def _ramp(n: int) -> np.ndarray:
    return 0.2 + 0.6 * np.sin(np.linspace(0.0, np.pi, n))


# ---------------------------------------------------------------------------
# Tracking error and cost
# ---------------------------------------------------------------------------

def test_tracking_error():
    assert_allclose(tracking_error(np.ones(4), [np.full(4, 0.6)]), 0.4)
    assert_allclose(tracking_error(np.zeros(3), [np.zeros(3), np.zeros(3)]), 0.0)
    assert_allclose(tracking_error(np.full(2, 0.5), [np.full(2, 0.3), np.full(2, 0.2)]), 0.0, atol=1e-15)
    with pytest.raises(SchedulerError):
        tracking_error(np.zeros(3), [np.zeros(4)])


def test_cost_examples(battery):
    assert cost(np.zeros(5), np.full(5, 0.5), battery) == 0.0
    e = np.full(100, 0.1)
    assert cost(e, np.full(100, 0.5), battery) == pytest.approx(1.0)
    soc = np.full(100, 0.5)
    soc[40] = 0.95
    assert cost(e, soc, battery) == pytest.approx(1.5)


def test_forecast_window_padding():
    series = ForecastSeries(dt_s=1.0, values=np.arange(5.0))
    window, padded = series.window(1, 3)
    assert_allclose(window, [1, 2, 3])
    assert not padded
    window, padded = series.window(3, 4)
    assert_allclose(window, [3, 4, 4, 4])
    assert padded
    with pytest.raises(SchedulerError):
        series.window(3, 4, pad=False)
    with pytest.raises(SchedulerError):
        ForecastSeries(dt_s=1.0, values=np.array([0.0, np.inf]))


# ---------------------------------------------------------------------------
# Candidate evaluation
# ---------------------------------------------------------------------------

def test_all_off_with_zero_forecast_costs_nothing(reference_specs, horizon, battery):
    models, states = _setup(reference_specs, horizon)
    schedule, evaluation = optimize_step(models, states, 0.5, np.zeros(horizon.fine_length), horizon, battery)
    assert schedule.as_strings() == ["000000"] * 3
    assert evaluation.cost == 0.0
    assert evaluation.num_transitions == 0


def test_evaluation_is_consistent_with_its_own_trace(toy_specs, small_horizon, battery):
    models, states = _setup(toy_specs, small_horizon)
    window = _ramp(small_horizon.fine_length)
    space = CombinationSpace([admissible_trajectories(s, small_horizon) for s in states])
    for schedule in space:
        ev = evaluate_candidate(schedule, models, window, 0.5, battery, small_horizon)
        demands = [
            simulate_switched(m.copy(), np.repeat(row, small_horizon.steps_per_ctrl))
            for m, row in zip(models, schedule.bits)
        ]
        e = window - np.sum(demands, axis=0)
        soc = soc_trajectory(0.5, e, battery, 1.0)
        assert ev.cost == pytest.approx(cost(e[1:], soc[1:], battery), rel=1e-12)
        assert ev.cost == pytest.approx(ev.tracking_term + sum(ev.barrier_terms), abs=1e-9)
    # evaluation never touches the live models
    assert all(m.step_idx == 0 and m.active == 0 for m in models)


def test_hand_simulated_single_load(battery):
    # one fine sample per control step, so "11" yields p = [0, 1 - e^{-5}]
    spec = LoadSpec(id=1, size_pu=1.0, poles_on=(-0.5,), poles_off=(-0.5,), t_on_min_s=10, t_off_min_s=10)
    horizon = HorizonConfig(n_steps=2, ctrl_interval_s=10.0, fine_dt_s=10.0)
    models, _ = _setup([spec], horizon)
    ev = evaluate_candidate(SwitchSchedule(bits=((1, 1),)), models, np.array([0.0, 1.0]), 0.5, battery, horizon)
    a = np.exp(-5.0)
    assert ev.tracking_term == pytest.approx(a**2, rel=1e-9)
    assert ev.num_transitions == 1
    assert ev.predicted_soc_end == pytest.approx(0.5 + battery.s_norm * 10.0 * a, rel=1e-12)


def test_vectorized_scores_match_naive_scan(toy_specs, small_horizon, battery):
    models, states = _setup(toy_specs, small_horizon)
    window = _ramp(small_horizon.fine_length)
    evaluator = HorizonEvaluator(models, states, window, 0.4, battery, small_horizon)
    costs, transitions = evaluator.score(0, len(evaluator))

    naive = [evaluate_candidate(s, models, window, 0.4, battery, small_horizon) for s in evaluator.space]
    assert_allclose(costs, [ev.cost for ev in naive], rtol=1e-9, atol=1e-12)
    assert list(transitions) == [ev.num_transitions for ev in naive]

    naive_best = min(range(len(naive)), key=lambda i: (naive[i].cost, naive[i].num_transitions, i))
    schedule, evaluation = optimize_step(models, states, 0.4, window, small_horizon, battery)
    assert schedule == naive[naive_best].schedule
    assert evaluation.cost == pytest.approx(naive[naive_best].cost, rel=1e-9)


def test_sustained_demand_keeps_the_matching_load_on(reference_specs, horizon, battery):
    models, states = _setup(reference_specs, horizon)
    simulate_switched(models[0], np.ones(1800, dtype=np.int8))
    states[0] = LoadSwitchState(
        load_id=1, active=1, last_on_idx=-30, last_off_idx=None, n_on_min=3, n_off_min=3, now_idx=0
    )
    schedule, evaluation = optimize_step(models, states, 0.5, np.full(horizon.fine_length, 0.60), horizon, battery)
    assert schedule.as_strings() == ["111111", "000000", "000000"]
    assert evaluation.cost < 1e-6


def test_select_best_tie_rules():
    costs = np.array([2.0, 1.0, 1.0 + 1e-14, 1.0, 3.0])
    transitions = np.array([0, 3, 1, 1, 0])
    assert select_best(costs, transitions) == 2
    assert select_best(np.array([1.0, 1.0]), np.array([0, 0])) == 0
    with pytest.raises(SchedulerError):
        select_best(np.empty(0), np.empty(0, dtype=int))


def test_resolve_workers():
    assert resolve_workers(3) == 3
    assert resolve_workers(0) >= 1
    assert resolve_workers(None) >= 1


@pytest.mark.parametrize("workers", [2, 3, 0])
def test_parallel_evaluation_is_deterministic(reference_specs, horizon, battery, workers):
    models, states = _setup(reference_specs, horizon)
    window = _ramp(horizon.fine_length)
    with CandidateOptimizer(horizon, battery, workers=1) as serial:
        reference = serial.optimize_step(models, states, 0.3, window)
    with CandidateOptimizer(horizon, battery, workers=workers) as parallel:
        result = parallel.optimize_step(models, states, 0.3, window)
    assert result.schedule == reference.schedule
    assert result.evaluation == reference.evaluation
    assert result.candidate_count == 308


# ---------------------------------------------------------------------------
# Closed loop
# ---------------------------------------------------------------------------

def test_zero_forecast_keeps_everything_off(reference_specs, horizon, battery):
    forecast = ForecastSeries(dt_s=1.0, values=np.zeros(10 * 60))
    solution = receding_horizon_run(forecast, reference_specs, battery, horizon, soc_init=0.5)
    trace = solution.trace
    assert trace.n_steps == 10 and trace.n_fine == 600
    assert np.all(trace.applied == 0)
    assert np.all(trace.soc == 0.5)
    assert np.all(trace.e_pu == 0.0)


def test_closed_loop_trace_is_reproducible(toy_specs, small_horizon, battery):
    values = _ramp(300)
    forecast = ForecastSeries(dt_s=1.0, values=values)
    solution = receding_horizon_run(forecast, toy_specs, battery, small_horizon, soc_init=0.5)
    trace = solution.trace
    assert trace.n_steps == 30

    p, e, soc = resimulate(solution)
    assert np.array_equal(p, trace.load_power_pu)
    assert np.array_equal(e, trace.e_pu)
    assert np.array_equal(soc, trace.soc)
    assert np.array_equal(trace.battery_power_pu, trace.e_pu)

    assert check_dwell_times(trace.applied, solution.dwell_steps) == []
    assert trace.applied.any()
    for step in solution.steps:
        ev = step.evaluation
        assert ev.cost == pytest.approx(ev.tracking_term + sum(ev.barrier_terms), abs=1e-9)
    assert trace.padded[-1] and not trace.padded[0]


def test_closed_loop_worker_count_does_not_change_trace(toy_specs, small_horizon, battery):
    forecast = ForecastSeries(dt_s=1.0, values=_ramp(240))
    one = receding_horizon_run(forecast, toy_specs, battery, small_horizon, workers=1).trace
    many = receding_horizon_run(forecast, toy_specs, battery, small_horizon, workers=4).trace
    assert np.array_equal(one.applied, many.applied)
    assert np.array_equal(one.soc, many.soc)
    assert np.array_equal(one.load_power_pu, many.load_power_pu)


def test_closed_loop_reports_progress(toy_specs, small_horizon, battery):
    seen = []
    forecast = ForecastSeries(dt_s=1.0, values=_ramp(60))
    receding_horizon_run(forecast, toy_specs, battery, small_horizon, on_step=lambda d, t: seen.append((d, t)))
    assert seen == [(1, 6), (2, 6), (3, 6), (4, 6), (5, 6), (6, 6)]


def test_closed_loop_input_errors(toy_specs, small_horizon, battery):
    forecast = ForecastSeries(dt_s=1.0, values=_ramp(60))
    with pytest.raises(SchedulerError):
        receding_horizon_run(forecast, toy_specs, battery, small_horizon, pad_forecast=False)
    with pytest.raises(SchedulerError):
        receding_horizon_run(ForecastSeries(dt_s=2.0, values=_ramp(60)), toy_specs, battery, small_horizon)
    with pytest.raises(SchedulerError):
        receding_horizon_run(forecast, toy_specs, battery, small_horizon, n_ctrl_steps=7)


def test_unconstrained_weights_allow_overcharge(toy_specs, small_horizon):
    surplus = ForecastSeries(dt_s=1.0, values=np.full(600, 1.5))
    loose = BatterySpec(s_norm=1 / 600, c2=0.0, c3=0.0, c4=0.0)
    trace = receding_horizon_run(surplus, toy_specs, loose, small_horizon, soc_init=0.8).trace
    assert trace.soc.max() > 0.9


def test_full_battery_is_drawn_back_into_band(toy_specs, small_horizon):
    light = ForecastSeries(dt_s=1.0, values=np.full(900, 0.1))
    spec = BatterySpec(s_norm=1 / 600)
    solution = receding_horizon_run(light, toy_specs, spec, small_horizon, soc_init=1.0)
    trace = solution.trace
    # every sample above soc_hi costs, so discharging pays off from the first step
    assert trace.soc[-1] < trace.soc[0]
    assert trace.soc.min() < 0.92
    assert trace.soc[-1] < 0.95
    assert trace.applied.any()
    assert check_dwell_times(trace.applied, solution.dwell_steps) == []


def test_strict_power_limit_still_schedules(toy_specs, small_horizon):
    strict = BatterySpec(p_norm=10.0)
    solution = receding_horizon_run(ForecastSeries(dt_s=1.0, values=_ramp(240)), toy_specs, strict, small_horizon)
    trace = solution.trace
    assert trace.n_steps == 24
    assert np.all(np.isfinite(trace.soc))
    assert check_dwell_times(trace.applied, solution.dwell_steps) == []
    # no candidate keeps |e| within 0.1 PU here, so the power barrier is live
    assert solution.steps[0].evaluation.barrier_terms[0] > 0.0
    assert trace.applied.any()
