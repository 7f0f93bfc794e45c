from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class DwellViolation:
    load_position: int
    start_step: int
    length: int
    required: int
    state: int  # 1 for an on-run, 0 for an off-run


def _runs(row: np.ndarray) -> list[tuple[int, int, int]]:
    """(start, length, value) for each maximal run."""
    runs: list[tuple[int, int, int]] = []
    if row.size == 0:
        return runs
    edges = np.flatnonzero(np.diff(row)) + 1
    starts = np.concatenate(([0], edges))
    ends = np.concatenate((edges, [row.size]))
    for s, e in zip(starts, ends):
        runs.append((int(s), int(e - s), int(row[s])))
    return runs


def check_dwell_times(
    applied: np.ndarray, dwell_steps: Sequence[tuple[int, int]], *, initial_active: int = 0
) -> list[DwellViolation]:
    """Post-hoc check of applied control-step switch signals, shape (steps, loads).

    Every run entered by a transition must last its minimum dwell, except
    the final run, which the end of the record may cut short. The leading
    run in the initial state has no lockout.
    """
    applied = np.asarray(applied)
    if applied.ndim != 2:
        raise ValueError(f"Applied switches must be 2-D (steps, loads), got shape {applied.shape}")
    if applied.shape[1] != len(dwell_steps):
        raise ValueError(f"{applied.shape[1]} load columns but {len(dwell_steps)} dwell entries")

    violations: list[DwellViolation] = []
    for i, (n_on, n_off) in enumerate(dwell_steps):
        row = applied[:, i].astype(np.int8)
        runs = _runs(row)
        for pos, (start, length, value) in enumerate(runs):
            if pos == 0 and value == initial_active:
                continue
            if pos == len(runs) - 1:
                continue
            required = n_on if value else n_off
            if length < required:
                violations.append(DwellViolation(i, start, length, required, value))
    return violations
