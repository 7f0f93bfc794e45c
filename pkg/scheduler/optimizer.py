from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from battery.constraints import (
    BatterySpec,
    barrier_terms,
    soc_from_charge,
    soc_trajectory,
)
from loads.model import DiscreteLoadModel, simulate_switched
from switching.switchset import (
    CombinationSpace,
    HorizonConfig,
    LoadSwitchState,
    SwitchSchedule,
    Trajectory,
    admissible_trajectories,
    count_transitions,
)
from utils.logging import get_logger

_LOG = get_logger("scheduler.optimizer")

TIE_REL_TOL = 1e-12
_BATCH = 2048


class SchedulerError(RuntimeError):
    """Raised when a scheduling step cannot be set up."""


@dataclass(frozen=True)
class ForecastSeries:
    """Predicted production P(t_k) on the fine grid, in PU."""

    dt_s: float
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1:
            raise SchedulerError(f"Forecast must be one-dimensional, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise SchedulerError("Forecast values must be finite")
        if not self.dt_s > 0:
            raise SchedulerError(f"Forecast dt_s must be > 0, got {self.dt_s}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    @property
    def duration_s(self) -> float:
        return len(self) * self.dt_s

    @property
    def times_s(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt_s

    def window(self, start: int, length: int, *, pad: bool = True) -> tuple[np.ndarray, bool]:
        """Samples [start, start+length); short windows are padded with the last value when allowed."""
        chunk = self.values[start : start + length]
        if chunk.size == length:
            return chunk.copy(), False
        if not pad:
            raise SchedulerError(
                f"Forecast exhausted: need samples {start}..{start + length - 1}, have {len(self)}"
            )
        if len(self) == 0:
            raise SchedulerError("Cannot pad an empty forecast")
        fill = chunk[-1] if chunk.size else self.values[-1]
        padded = np.concatenate([chunk, np.full(length - chunk.size, fill)])
        return padded, True


@dataclass(frozen=True)
class CandidateEvaluation:
    schedule: SwitchSchedule
    cost: float
    tracking_term: float
    barrier_terms: tuple[float, float, float, float]
    predicted_soc_end: float
    num_transitions: int
    index: int = -1

    @property
    def active_barriers(self) -> tuple[str, ...]:
        return tuple(f"B{j + 1}" for j, b in enumerate(self.barrier_terms) if b > 0)


def tracking_error(forecast_window: np.ndarray, demands: Sequence[np.ndarray] | np.ndarray) -> np.ndarray:
    """e(t_k) = P(t_k) - sum_i p_i(t_k)."""
    forecast_window = np.asarray(forecast_window, dtype=float)
    stacked = np.atleast_2d(np.asarray(demands, dtype=float))
    if stacked.size == 0:
        stacked = np.zeros((0, forecast_window.size))
    if stacked.shape[-1] != forecast_window.size:
        raise SchedulerError(
            f"Demand length {stacked.shape[-1]} does not match forecast window length {forecast_window.size}"
        )
    return forecast_window - stacked.sum(axis=0)


def tracking_term(e: np.ndarray) -> np.ndarray | float:
    e = np.asarray(e, dtype=float)
    return np.sum(e * e, axis=-1)


def cost(e: np.ndarray, soc_traj: np.ndarray, spec: BatterySpec) -> float:
    """Least-squares tracking plus barrier penalties over already-aligned samples."""
    return float(tracking_term(e)) + float(np.sum(barrier_terms(e, soc_traj, spec)))


def evaluate_candidate(
    schedule: SwitchSchedule,
    models: Sequence[DiscreteLoadModel],
    forecast_window: np.ndarray,
    soc0: float,
    spec: BatterySpec,
    horizon: HorizonConfig,
) -> CandidateEvaluation:
    """Simulate one schedule step by step on private model copies and score it."""
    if schedule.n_loads != len(models):
        raise SchedulerError(f"Schedule has {schedule.n_loads} rows for {len(models)} loads")
    demands = []
    transitions = 0
    for row, model in zip(schedule.bits, models):
        twin = model.copy()
        transitions += count_transitions(row, model.active)
        w = np.repeat(np.asarray(row, dtype=np.int8), horizon.steps_per_ctrl)
        demands.append(simulate_switched(twin, w))
    e = tracking_error(forecast_window, demands)
    soc = soc_trajectory(soc0, e, spec, horizon.fine_dt_s)
    track = float(tracking_term(e[1:]))
    terms = barrier_terms(e[1:], soc[1:], spec)
    return CandidateEvaluation(
        schedule=schedule,
        cost=track + float(terms.sum()),
        tracking_term=track,
        barrier_terms=tuple(float(t) for t in terms),  # type: ignore[arg-type]
        predicted_soc_end=float(soc[-1]) if soc.size else soc0,
        num_transitions=transitions,
    )


def _simulate_trajectories(
    model: DiscreteLoadModel, trajectories: Sequence[Trajectory], steps: int
) -> np.ndarray:
    """Demand rows for each trajectory; prefixes shared between trajectories are simulated once."""
    cache: dict[Trajectory, tuple[np.ndarray, np.ndarray, int]] = {}
    rows = np.empty((len(trajectories), len(trajectories[0]) * steps))
    for r, traj in enumerate(trajectories):
        state, active = model.state, model.active
        for j in range(len(traj)):
            key = traj[: j + 1]
            hit = cache.get(key)
            if hit is None:
                power, state = model.propagate_interval(state, active, traj[j], steps)
                active = traj[j]
                cache[key] = (power, state, active)
            else:
                power, state, active = hit
            rows[r, j * steps : (j + 1) * steps] = power
    return rows


class HorizonEvaluator:
    """Scores every admissible combination for one control step.

    Per-load demand rows are simulated once per trajectory; a candidate's
    total demand is the sum of its rows.
    """

    def __init__(
        self,
        models: Sequence[DiscreteLoadModel],
        states: Sequence[LoadSwitchState],
        forecast_window: np.ndarray,
        soc0: float,
        spec: BatterySpec,
        horizon: HorizonConfig,
    ) -> None:
        if len(models) != len(states):
            raise SchedulerError(f"{len(models)} models but {len(states)} switch states")
        window = np.asarray(forecast_window, dtype=float)
        if window.size != horizon.fine_length:
            raise SchedulerError(
                f"Forecast window has {window.size} samples, horizon needs {horizon.fine_length}"
            )
        self.models = list(models)
        self.horizon = horizon
        self.spec = spec
        self.soc0 = float(soc0)
        self.window = window
        self.trajectories = [admissible_trajectories(s, horizon) for s in states]
        self.space = CombinationSpace(self.trajectories)
        self._demand = [
            _simulate_trajectories(m, trajs, horizon.steps_per_ctrl)
            for m, trajs in zip(self.models, self.trajectories)
        ]
        self._transitions = [
            np.array([count_transitions(t, m.active) for t in trajs], dtype=np.int64)
            for m, trajs in zip(self.models, self.trajectories)
        ]

    def __len__(self) -> int:
        return len(self.space)

    def _score(self, picks: tuple[np.ndarray, ...]) -> dict[str, np.ndarray]:
        total = self._demand[0][picks[0]]
        for rows, p in zip(self._demand[1:], picks[1:]):
            total = total + rows[p]
        e = self.window - total
        soc = soc_from_charge(self.soc0, np.cumsum(e, axis=1), self.spec, self.horizon.fine_dt_s)
        eh, sh = e[:, 1:], soc[:, 1:]
        track = np.sum(eh * eh, axis=1)
        terms = barrier_terms(eh, sh, self.spec)
        transitions = self._transitions[0][picks[0]]
        for counts, p in zip(self._transitions[1:], picks[1:]):
            transitions = transitions + counts[p]
        return {
            "cost": track + terms.sum(axis=1),
            "tracking": track,
            "barriers": terms,
            "soc_end": soc[:, -1],
            "transitions": transitions,
        }

    def score(self, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
        """(cost, transitions) for flat candidates [start, stop)."""
        costs, transitions = [], []
        for lo in range(start, stop, _BATCH):
            hi = min(stop, lo + _BATCH)
            scored = self._score(self.space.load_indices(lo, hi))
            costs.append(scored["cost"])
            transitions.append(scored["transitions"])
        if not costs:
            return np.empty(0), np.empty(0, dtype=np.int64)
        return np.concatenate(costs), np.concatenate(transitions)

    def evaluation_at(self, index: int) -> CandidateEvaluation:
        scored = self._score(self.space.load_indices(index, index + 1))
        return CandidateEvaluation(
            schedule=self.space.schedule_at(index),
            cost=float(scored["cost"][0]),
            tracking_term=float(scored["tracking"][0]),
            barrier_terms=tuple(float(b) for b in scored["barriers"][0]),  # type: ignore[arg-type]
            predicted_soc_end=float(scored["soc_end"][0]),
            num_transitions=int(scored["transitions"][0]),
            index=index,
        )


def select_best(costs: np.ndarray, transitions: np.ndarray, rel_tol: float = TIE_REL_TOL) -> int:
    """Argmin with ties (within rel_tol of the minimum) broken by fewest transitions, then lowest index."""
    if costs.size == 0:
        raise SchedulerError("No candidates to choose from")
    best = float(costs.min())
    near = np.flatnonzero(costs <= best + rel_tol * abs(best))
    fewest = transitions[near].min()
    return int(near[transitions[near] == fewest][0])


def resolve_workers(workers: Optional[int]) -> int:
    if not workers or workers <= 0:
        return os.cpu_count() or 1
    return int(workers)


@dataclass(frozen=True)
class StepResult:
    schedule: SwitchSchedule
    evaluation: CandidateEvaluation
    candidate_count: int


class CandidateOptimizer:
    """Evaluates the admissible set on a static partition across a thread pool."""

    def __init__(self, horizon: HorizonConfig, spec: BatterySpec, *, workers: Optional[int] = 1) -> None:
        self.horizon = horizon
        self.spec = spec
        self.workers = resolve_workers(workers)
        self._executor: Optional[ThreadPoolExecutor] = None
        if self.workers > 1:
            self._executor = ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="candidates")
        self._log = get_logger("scheduler.optimizer", workers=self.workers)

    def optimize_step(
        self,
        models: Sequence[DiscreteLoadModel],
        states: Sequence[LoadSwitchState],
        soc0: float,
        forecast_window: np.ndarray,
    ) -> StepResult:
        evaluator = HorizonEvaluator(models, states, forecast_window, soc0, self.spec, self.horizon)
        ranges = evaluator.space.partition(self.workers)
        if self._executor is None or len(ranges) == 1:
            parts = [evaluator.score(r.start, r.stop) for r in ranges]
        else:
            parts = list(self._executor.map(lambda r: evaluator.score(r.start, r.stop), ranges))
        costs = np.concatenate([p[0] for p in parts])
        transitions = np.concatenate([p[1] for p in parts])
        index = select_best(costs, transitions)
        evaluation = evaluator.evaluation_at(index)
        self._log.debug(
            "Step solved",
            candidates=len(evaluator),
            index=index,
            cost=evaluation.cost,
            schedule=",".join(evaluation.schedule.as_strings()),
        )
        return StepResult(schedule=evaluation.schedule, evaluation=evaluation, candidate_count=len(evaluator))

    def shutdown(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True, cancel_futures=True)
            self._executor = None

    def __enter__(self) -> "CandidateOptimizer":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        self.shutdown()
        return False


def optimize_step(
    models: Sequence[DiscreteLoadModel],
    states: Sequence[LoadSwitchState],
    soc0: float,
    forecast_window: np.ndarray,
    horizon: HorizonConfig,
    spec: BatterySpec,
    *,
    workers: Optional[int] = 1,
) -> tuple[SwitchSchedule, CandidateEvaluation]:
    with CandidateOptimizer(horizon, spec, workers=workers) as optimizer:
        result = optimizer.optimize_step(models, states, soc0, forecast_window)
    return result.schedule, result.evaluation
