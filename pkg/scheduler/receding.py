from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from battery.constraints import BatterySpec, BatteryState, check_power_constraint, soc_from_charge
from loads.model import DiscreteLoadModel, LoadSpec, simulate_switched
from scheduler.optimizer import CandidateEvaluation, CandidateOptimizer, ForecastSeries, SchedulerError
from simulation.trace import SimTrace
from switching.switchset import HorizonConfig, LoadSwitchState
from utils.logging import bind, get_logger

_LOG = get_logger("scheduler.receding")

_BUDGET_WARNINGS = 5

StepCallback = Callable[[int, int], None]


@dataclass(frozen=True)
class StepDiagnostics:
    step: int
    t_s: float
    applied: tuple[int, ...]
    candidate_count: int
    wall_time_s: float
    cost: float
    active_barriers: tuple[str, ...]
    padded: bool
    evaluation: CandidateEvaluation


@dataclass
class ScheduleSolution:
    """Outcome of a closed-loop run: trace, per-step diagnostics and the setup used."""

    trace: SimTrace
    specs: tuple[LoadSpec, ...]
    battery: BatterySpec
    horizon: HorizonConfig
    soc_init: float
    dwell_steps: list[tuple[int, int]]
    step_budget_s: float = 0.3
    steps: list[StepDiagnostics] = field(default_factory=list)

    @property
    def applied(self) -> np.ndarray:
        return self.trace.applied


def _check_inputs(forecast: ForecastSeries, horizon: HorizonConfig, total_steps: int, pad: bool) -> None:
    if abs(forecast.dt_s - horizon.fine_dt_s) > 1e-9 * max(1.0, horizon.fine_dt_s):
        raise SchedulerError(
            f"Forecast spacing {forecast.dt_s:g} s does not match the fine step {horizon.fine_dt_s:g} s"
        )
    spc = horizon.steps_per_ctrl
    if total_steps * spc > len(forecast):
        raise SchedulerError(
            f"Forecast of {len(forecast)} samples cannot cover {total_steps} control steps of {spc} samples"
        )
    if not pad and total_steps and (total_steps - 1) * spc + horizon.fine_length > len(forecast):
        raise SchedulerError("Forecast is shorter than the last horizon and padding is disabled")


def receding_horizon_run(
    forecast: ForecastSeries,
    specs: Sequence[LoadSpec],
    battery: BatterySpec,
    horizon: HorizonConfig,
    *,
    soc_init: float = 0.5,
    workers: Optional[int] = 1,
    pad_forecast: bool = True,
    step_budget_s: float = 0.3,
    n_ctrl_steps: Optional[int] = None,
    on_step: Optional[StepCallback] = None,
) -> ScheduleSolution:
    """Re-plan every control step, apply only the first column, and record the loop.

    Each applied interval is simulated sample by sample on the live load
    models, and SOC continues one running sum of tracking error, so the
    stored trace can be reproduced by re-simulating the applied signals.
    """
    BatteryState(soc_init)
    specs = tuple(specs)
    dwell = horizon.validate_loads(specs)
    spc = horizon.steps_per_ctrl
    dt = horizon.fine_dt_s
    total_steps = len(forecast) // spc if n_ctrl_steps is None else int(n_ctrl_steps)
    if total_steps < 0:
        raise SchedulerError(f"Control step count must be >= 0, got {total_steps}")
    _check_inputs(forecast, horizon, total_steps, pad_forecast)

    log = bind(_LOG, loads=len(specs), steps=total_steps, horizon=horizon.n_steps)
    log.info("Closed-loop run starting", soc_init=soc_init, fine_samples=total_steps * spc)

    models = [DiscreteLoadModel.from_spec(s, dt) for s in specs]
    states = [LoadSwitchState.initial(s.id, on, off) for s, (on, off) in zip(specs, dwell)]

    load_power: list[np.ndarray] = []
    e_parts: list[np.ndarray] = []
    soc_parts: list[np.ndarray] = []
    diagnostics: list[StepDiagnostics] = []
    charge = 0.0
    soc_now = soc_init
    in_band = battery.soc_lo <= soc_init <= battery.soc_hi
    over_budget = 0
    padding_reported = False

    with CandidateOptimizer(horizon, battery, workers=workers) as optimizer:
        for k in range(total_steps):
            start = k * spc
            window, padded = forecast.window(start, horizon.fine_length, pad=pad_forecast)

            t0 = time.perf_counter()
            result = optimizer.optimize_step(models, states, soc_now, window)
            elapsed = time.perf_counter() - t0

            bits = result.schedule.first_column
            p = np.column_stack(
                [simulate_switched(m, np.full(spc, b, dtype=np.int8)) for m, b in zip(models, bits)]
            ) if models else np.zeros((spc, 0))
            e = forecast.values[start : start + spc] - p.sum(axis=1)
            charge_seg = np.cumsum(np.concatenate(([charge], e)))[1:]
            charge = float(charge_seg[-1])
            soc_seg = soc_from_charge(soc_init, charge_seg, battery, dt)
            soc_now = float(soc_seg[-1])
            states = [s.advanced(b) for s, b in zip(states, bits)]

            load_power.append(p)
            e_parts.append(e)
            soc_parts.append(soc_seg)
            evaluation = result.evaluation
            diagnostics.append(
                StepDiagnostics(
                    step=k,
                    t_s=start * dt,
                    applied=tuple(bits),
                    candidate_count=result.candidate_count,
                    wall_time_s=elapsed,
                    cost=evaluation.cost,
                    active_barriers=evaluation.active_barriers,
                    padded=padded,
                    evaluation=evaluation,
                )
            )

            ok, peak = check_power_constraint(e, battery)
            if not ok:
                log.warning("Battery power limit exceeded", step=k, ratio=peak)
            now_in_band = bool(np.all((soc_seg >= battery.soc_lo) & (soc_seg <= battery.soc_hi)))
            if in_band and not now_in_band:
                log.warning("SOC left its band", step=k, soc_min=float(soc_seg.min()), soc_max=float(soc_seg.max()))
            elif not in_band and now_in_band:
                log.info("SOC back in band", step=k, soc=soc_now)
            in_band = now_in_band
            if padded and not padding_reported:
                log.warning("Forecast window padded with its last value", step=k)
                padding_reported = True
            if elapsed > step_budget_s:
                over_budget += 1
                if over_budget <= _BUDGET_WARNINGS:
                    log.warning("Step exceeded time budget", step=k, wall_time_s=elapsed, budget_s=step_budget_s)
            log.debug(
                "Step applied",
                step=k,
                applied="".join(str(b) for b in bits),
                candidates=result.candidate_count,
                cost=evaluation.cost,
                soc=soc_now,
                padded=padded,
            )
            if on_step is not None:
                on_step(k + 1, total_steps)

    trace = _build_trace(specs, horizon, forecast, load_power, e_parts, soc_parts, diagnostics)
    if over_budget > _BUDGET_WARNINGS:
        log.warning("More steps exceeded the time budget", total_over_budget=over_budget)
    log.info(
        "Closed-loop run finished",
        final_soc=soc_now,
        total_wall_time_s=float(trace.step_wall_time_s.sum()) if trace.n_steps else 0.0,
    )
    return ScheduleSolution(
        trace=trace,
        specs=specs,
        battery=battery,
        horizon=horizon,
        soc_init=soc_init,
        dwell_steps=dwell,
        step_budget_s=step_budget_s,
        steps=diagnostics,
    )


def _build_trace(
    specs: Sequence[LoadSpec],
    horizon: HorizonConfig,
    forecast: ForecastSeries,
    load_power: list[np.ndarray],
    e_parts: list[np.ndarray],
    soc_parts: list[np.ndarray],
    diagnostics: list[StepDiagnostics],
) -> SimTrace:
    ids = [s.id for s in specs]
    if not diagnostics:
        return SimTrace.empty(ids, horizon.fine_dt_s, horizon.ctrl_interval_s)

    p = np.concatenate(load_power, axis=0)
    n = p.shape[0]
    e = np.concatenate(e_parts)
    return SimTrace(
        load_ids=tuple(ids),
        fine_dt_s=horizon.fine_dt_s,
        ctrl_interval_s=horizon.ctrl_interval_s,
        t_s=np.arange(n) * horizon.fine_dt_s,
        forecast_pu=np.array(forecast.values[:n], dtype=float),
        load_power_pu=p,
        total_p_pu=p.sum(axis=1),
        e_pu=e,
        battery_power_pu=e.copy(),
        soc=np.concatenate(soc_parts),
        step_t_s=np.array([d.t_s for d in diagnostics]),
        applied=np.array([d.applied for d in diagnostics], dtype=np.int8).reshape(len(diagnostics), len(ids)),
        candidate_count=np.array([d.candidate_count for d in diagnostics], dtype=np.int64),
        step_wall_time_s=np.array([d.wall_time_s for d in diagnostics]),
        step_cost=np.array([d.cost for d in diagnostics]),
        active_barriers=["|".join(d.active_barriers) for d in diagnostics],
        padded=np.array([d.padded for d in diagnostics], dtype=bool),
    )


def resimulate(solution: ScheduleSolution) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Replay the applied control signals on fresh models over the whole run.

    Returns (load powers (samples, loads), tracking error, SOC).
    """
    trace = solution.trace
    spc = solution.horizon.steps_per_ctrl
    dt = solution.horizon.fine_dt_s
    columns = []
    for i, spec in enumerate(solution.specs):
        model = DiscreteLoadModel.from_spec(spec, dt)
        w = np.repeat(trace.applied[:, i], spc)
        columns.append(simulate_switched(model, w))
    p = np.column_stack(columns) if columns else np.zeros((trace.n_fine, 0))
    e = trace.forecast_pu - p.sum(axis=1)
    soc = soc_from_charge(solution.soc_init, np.cumsum(e), solution.battery, dt)
    return p, e, soc
