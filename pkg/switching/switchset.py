from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from loads.model import LoadSpec
from utils.logging import get_logger

_LOG = get_logger("switching.switchset")

_MULTIPLE_TOL = 1e-9

Trajectory = tuple[int, ...]


class HorizonError(ValueError):
    """Raised when the horizon or dwell times are inconsistent."""


def _as_multiple(value: float, unit: float, *, what: str) -> int:
    ratio = value / unit
    count = int(round(ratio))
    if count <= 0 or abs(ratio - count) > _MULTIPLE_TOL * max(1.0, ratio):
        raise HorizonError(f"{what} = {value} is not a positive integer multiple of {unit}")
    return count


@dataclass(frozen=True)
class HorizonConfig:
    n_steps: int = 6
    ctrl_interval_s: float = 60.0
    fine_dt_s: float = 1.0
    steps_per_ctrl: int = field(init=False)

    def __post_init__(self) -> None:
        if self.n_steps < 1:
            raise HorizonError(f"n_steps must be >= 1, got {self.n_steps}")
        if not self.fine_dt_s > 0:
            raise HorizonError(f"fine_dt_s must be > 0, got {self.fine_dt_s}")
        spc = _as_multiple(self.ctrl_interval_s, self.fine_dt_s, what="ctrl_interval_s")
        object.__setattr__(self, "steps_per_ctrl", spc)

    @property
    def horizon_s(self) -> float:
        return self.n_steps * self.ctrl_interval_s

    @property
    def fine_length(self) -> int:
        return self.n_steps * self.steps_per_ctrl

    def dwell_steps(self, spec: LoadSpec) -> tuple[int, int]:
        """(n_on_min, n_off_min) in control steps; the dwell times must sit on both grids."""
        for t, label in ((spec.t_on_min_s, "t_on_min_s"), (spec.t_off_min_s, "t_off_min_s")):
            _as_multiple(t, self.fine_dt_s, what=f"load {spec.id} {label}")
        n_on = _as_multiple(spec.t_on_min_s, self.ctrl_interval_s, what=f"load {spec.id} t_on_min_s")
        n_off = _as_multiple(spec.t_off_min_s, self.ctrl_interval_s, what=f"load {spec.id} t_off_min_s")
        return n_on, n_off

    def validate_loads(self, specs: Sequence[LoadSpec]) -> list[tuple[int, int]]:
        """Check max_i(T_on, T_off) < T and grid alignment; returns dwell steps per load."""
        dwell = [self.dwell_steps(s) for s in specs]
        longest = max((max(s.t_on_min_s, s.t_off_min_s) for s in specs), default=0.0)
        if not longest < self.horizon_s:
            raise HorizonError(
                f"Horizon {self.horizon_s:g} s must exceed the longest minimum on/off time {longest:g} s"
            )
        return dwell


@dataclass(frozen=True)
class LoadSwitchState:
    """Switching history of one load on the control grid.

    ``now_idx`` is the control step the horizon starts at. ``None`` for a
    last index means the load never made that transition.
    """

    load_id: int
    active: int
    last_on_idx: Optional[int]
    last_off_idx: Optional[int]
    n_on_min: int
    n_off_min: int
    now_idx: int = 0

    def __post_init__(self) -> None:
        if self.active not in (0, 1):
            raise HorizonError(f"Load {self.load_id}: active must be 0 or 1")
        if self.n_on_min < 1 or self.n_off_min < 1:
            raise HorizonError(f"Load {self.load_id}: dwell steps must be >= 1")
        on = -math.inf if self.last_on_idx is None else self.last_on_idx
        off = -math.inf if self.last_off_idx is None else self.last_off_idx
        if self.active and (self.last_on_idx is None or on < off):
            raise HorizonError(f"Load {self.load_id}: active load must have switched on after its last switch-off")
        if not self.active and self.last_on_idx is not None and off < on:
            raise HorizonError(f"Load {self.load_id}: inactive load must have switched off after its last switch-on")

    @classmethod
    def initial(cls, load_id: int, n_on_min: int, n_off_min: int) -> "LoadSwitchState":
        return cls(load_id=load_id, active=0, last_on_idx=None, last_off_idx=None, n_on_min=n_on_min, n_off_min=n_off_min)

    def advanced(self, bit: int) -> "LoadSwitchState":
        """History after applying ``bit`` at ``now_idx``."""
        last_on, last_off = self.last_on_idx, self.last_off_idx
        if bit != self.active:
            if bit:
                last_on = self.now_idx
            else:
                last_off = self.now_idx
        return LoadSwitchState(
            load_id=self.load_id,
            active=int(bit),
            last_on_idx=last_on,
            last_off_idx=last_off,
            n_on_min=self.n_on_min,
            n_off_min=self.n_off_min,
            now_idx=self.now_idx + 1,
        )


def _can_turn_on(t: int, j: int, last_off: Optional[int], n_off: int, n_on: int, horizon_n: int) -> bool:
    if j > horizon_n - n_on:
        return False
    return last_off is None or t >= last_off + n_off


def _can_turn_off(t: int, last_on: Optional[int], n_on: int) -> bool:
    return last_on is None or t >= last_on + n_on


def admissible_trajectories(state: LoadSwitchState, horizon: HorizonConfig) -> list[Trajectory]:
    """All binary length-N trajectories whose every transition respects the dwell counters.

    Position j is control step ``state.now_idx + j``. Turning on at j also
    needs j <= N - n_on_min. Runs cut off by the horizon end are allowed.
    Sorted lexicographically.
    """
    N = horizon.n_steps
    found: list[Trajectory] = []

    def walk(j: int, value: int, last_on: Optional[int], last_off: Optional[int], prefix: list[int]) -> None:
        if j == N:
            found.append(tuple(prefix))
            return
        t = state.now_idx + j
        prefix.append(value)
        walk(j + 1, value, last_on, last_off, prefix)
        prefix.pop()
        if value == 0 and _can_turn_on(t, j, last_off, state.n_off_min, state.n_on_min, N):
            prefix.append(1)
            walk(j + 1, 1, t, last_off, prefix)
            prefix.pop()
        elif value == 1 and _can_turn_off(t, last_on, state.n_on_min):
            prefix.append(0)
            walk(j + 1, 0, last_on, t, prefix)
            prefix.pop()

    walk(0, state.active, state.last_on_idx, state.last_off_idx, [])
    found.sort()
    return found


def is_admissible(bits: Sequence[int], state: LoadSwitchState, horizon: HorizonConfig) -> bool:
    """Row-wise filter counterpart of :func:`admissible_trajectories`."""
    if len(bits) != horizon.n_steps:
        return False
    value, last_on, last_off = state.active, state.last_on_idx, state.last_off_idx
    for j, bit in enumerate(bits):
        if bit not in (0, 1):
            return False
        if bit == value:
            continue
        t = state.now_idx + j
        if bit == 1:
            if not _can_turn_on(t, j, last_off, state.n_off_min, state.n_on_min, horizon.n_steps):
                return False
            last_on = t
        else:
            if not _can_turn_off(t, last_on, state.n_on_min):
                return False
            last_off = t
        value = bit
    return True


def brute_force_trajectories(state: LoadSwitchState, horizon: HorizonConfig) -> list[Trajectory]:
    return [
        bits
        for bits in itertools.product((0, 1), repeat=horizon.n_steps)
        if is_admissible(bits, state, horizon)
    ]


def count_transitions(bits: Sequence[int], current: int) -> int:
    count = 0
    prev = current
    for b in bits:
        if b != prev:
            count += 1
        prev = b
    return count


@dataclass(frozen=True)
class SwitchSchedule:
    """n x N binary decisions: rows are loads, columns are control steps k..k+N-1."""

    bits: tuple[Trajectory, ...]

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.int8)

    @property
    def n_loads(self) -> int:
        return len(self.bits)

    @property
    def n_steps(self) -> int:
        return len(self.bits[0]) if self.bits else 0

    @property
    def first_column(self) -> tuple[int, ...]:
        return tuple(row[0] for row in self.bits)

    def transitions(self, current: Sequence[int]) -> int:
        return sum(count_transitions(row, c) for row, c in zip(self.bits, current))

    def as_strings(self) -> list[str]:
        return ["".join(str(b) for b in row) for row in self.bits]


class CombinationSpace:
    """Cartesian product of per-load trajectory lists, load 1 varying slowest.

    Indexable, so the product can be split into contiguous index ranges and
    evaluated independently.
    """

    def __init__(self, per_load: Sequence[Sequence[Trajectory]]) -> None:
        if not per_load:
            raise HorizonError("At least one load is required")
        for i, trajs in enumerate(per_load):
            if not trajs:
                raise HorizonError(f"Load position {i} has no admissible trajectory")
        self.per_load: tuple[tuple[Trajectory, ...], ...] = tuple(tuple(t) for t in per_load)
        self.shape: tuple[int, ...] = tuple(len(t) for t in self.per_load)

    def __len__(self) -> int:
        return math.prod(self.shape)

    def __iter__(self) -> Iterator[SwitchSchedule]:
        for combo in itertools.product(*self.per_load):
            yield SwitchSchedule(bits=tuple(combo))

    def schedule_at(self, index: int) -> SwitchSchedule:
        if not 0 <= index < len(self):
            raise IndexError(index)
        picks = np.unravel_index(index, self.shape)
        return SwitchSchedule(bits=tuple(self.per_load[i][int(p)] for i, p in enumerate(picks)))

    def load_indices(self, start: int, stop: int) -> tuple[np.ndarray, ...]:
        """Per-load trajectory indices for flat candidates [start, stop)."""
        return np.unravel_index(np.arange(start, stop, dtype=np.int64), self.shape)

    def partition(self, parts: int) -> list[range]:
        """Static contiguous split into at most ``parts`` non-empty ranges."""
        total = len(self)
        parts = max(1, min(parts, total))
        bounds = np.linspace(0, total, parts + 1).round().astype(int)
        return [range(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def enumerate_combinations(per_load: Sequence[Sequence[Trajectory]]) -> Iterator[SwitchSchedule]:
    return iter(CombinationSpace(per_load))


def cardinality_bound(n: int, N: int) -> int:
    return (2**n) ** (N - 1)


def cardinality_bound_check(count: int, n: int, N: int) -> bool:
    """True when ``count`` stays strictly below the trivial (2^n)^(N-1) growth."""
    return count < cardinality_bound(n, N)
