"""Admissible switching sets, the combination space and the post-hoc dwell checker."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from loads.model import LoadSpec
from switching.history import check_dwell_times
from switching.switchset import (
    CombinationSpace,
    HorizonConfig,
    HorizonError,
    LoadSwitchState,
    SwitchSchedule,
    admissible_trajectories,
    brute_force_trajectories,
    cardinality_bound,
    cardinality_bound_check,
    count_transitions,
    enumerate_combinations,
    is_admissible,
)


def _oracle(state: LoadSwitchState, N: int) -> list[tuple[int, ...]]:
    """Filter all 2^N sequences, tracking the most recent on/off step as the run unfolds."""
    keep = []
    for bits in itertools.product((0, 1), repeat=N):
        value, last_on, last_off, ok = state.active, state.last_on_idx, state.last_off_idx, True
        for j, b in enumerate(bits):
            t = state.now_idx + j
            if b == value:
                continue
            if b == 1:
                ok = j <= N - state.n_on_min and (last_off is None or t - last_off >= state.n_off_min)
                last_on = t
            else:
                ok = last_on is None or t - last_on >= state.n_on_min
                last_off = t
            value = b
            if not ok:
                break
        if ok:
            keep.append(bits)
    return keep


def _state(active=0, last_on=None, last_off=None, n_on=3, n_off=3, now=0, load_id=1):
    return LoadSwitchState(
        load_id=load_id,
        active=active,
        last_on_idx=last_on,
        last_off_idx=last_off,
        n_on_min=n_on,
        n_off_min=n_off,
        now_idx=now,
    )


# ---------------------------------------------------------------------------
# Horizon configuration
# ---------------------------------------------------------------------------

def test_horizon_defaults(horizon):
    assert horizon.steps_per_ctrl == 60
    assert horizon.fine_length == 360
    assert horizon.horizon_s == 360.0


def test_reference_dwell_steps(horizon, reference_specs):
    assert horizon.validate_loads(reference_specs) == [(3, 3), (4, 4), (5, 5)]


def test_horizon_must_exceed_longest_dwell(reference_specs):
    with pytest.raises(HorizonError, match="must exceed"):
        HorizonConfig(n_steps=5).validate_loads(reference_specs)


def test_dwell_must_sit_on_control_grid(horizon):
    spec = LoadSpec(id=9, size_pu=0.1, poles_on=(-0.1,), poles_off=(-0.1,), t_on_min_s=90, t_off_min_s=60)
    with pytest.raises(HorizonError, match="t_on_min_s"):
        horizon.dwell_steps(spec)


def test_control_interval_must_be_multiple_of_fine_step():
    with pytest.raises(HorizonError):
        HorizonConfig(ctrl_interval_s=60.0, fine_dt_s=7.0)
    with pytest.raises(HorizonError):
        HorizonConfig(n_steps=0)


def test_switch_state_invariants():
    with pytest.raises(HorizonError):
        _state(active=1, last_on=None)
    with pytest.raises(HorizonError):
        _state(active=1, last_on=2, last_off=5)
    with pytest.raises(HorizonError):
        _state(active=0, last_on=5, last_off=2)
    with pytest.raises(HorizonError):
        _state(active=2)


def test_advanced_records_transitions():
    s = _state()
    s = s.advanced(1)
    assert (s.active, s.last_on_idx, s.last_off_idx, s.now_idx) == (1, 0, None, 1)
    s = s.advanced(1).advanced(1).advanced(0)
    assert (s.active, s.last_on_idx, s.last_off_idx, s.now_idx) == (0, 0, 3, 4)


# ---------------------------------------------------------------------------
# Admissible trajectories
# ---------------------------------------------------------------------------

def test_three_step_example():
    state = _state(n_on=2, n_off=2, last_on=-10, last_off=-8, now=0)
    got = admissible_trajectories(state, HorizonConfig(n_steps=3))
    assert got == [(0, 0, 0), (0, 1, 1), (1, 1, 0), (1, 1, 1)]


def test_single_step_mid_dwell_holds():
    on_state = _state(active=1, last_on=5, n_on=3, now=6)
    off_state = _state(active=0, last_on=1, last_off=5, n_off=3, now=6)
    for s in (on_state, off_state):
        assert admissible_trajectories(s, HorizonConfig(n_steps=1)) == [(s.active,)]


def test_reference_counts(horizon, reference_specs):
    dwell = horizon.validate_loads(reference_specs)
    states = [LoadSwitchState.initial(s.id, on, off) for s, (on, off) in zip(reference_specs, dwell)]
    counts = [len(admissible_trajectories(s, horizon)) for s in states]
    assert counts == [11, 7, 4]
    total = int(np.prod(counts))
    assert total == 308
    assert cardinality_bound_check(total, 3, 6)


@pytest.mark.parametrize("N", range(1, 7))
@pytest.mark.parametrize("n_on,n_off", [(1, 1), (1, 3), (2, 2), (3, 2), (4, 5), (5, 5)])
@pytest.mark.parametrize(
    "history",
    [
        dict(active=0, last_on=None, last_off=None, now=0),
        dict(active=0, last_on=-6, last_off=-1, now=0),
        dict(active=1, last_on=-1, last_off=-9, now=0),
        dict(active=1, last_on=8, last_off=3, now=10),
        dict(active=0, last_on=2, last_off=9, now=10),
    ],
)
def test_matches_bruteforce_oracle(N, n_on, n_off, history):
    state = _state(n_on=n_on, n_off=n_off, **history)
    horizon = HorizonConfig(n_steps=N)
    got = admissible_trajectories(state, horizon)
    assert got == _oracle(state, N)
    assert got == brute_force_trajectories(state, horizon)
    assert all(is_admissible(bits, state, horizon) for bits in got)


def test_hold_is_always_admissible():
    for active, last_on, last_off in [(0, None, None), (1, 4, 0), (0, 3, 5)]:
        s = _state(active=active, last_on=last_on, last_off=last_off, n_on=5, n_off=5, now=6)
        assert (active,) * 6 in admissible_trajectories(s, HorizonConfig())


def test_recent_switch_off_delays_turn_on():
    # switched off 1 step ago with a 4-step off-dwell: earliest turn-on is step 3
    s = _state(active=0, last_on=-5, last_off=-1, n_on=2, n_off=4, now=0)
    for bits in admissible_trajectories(s, HorizonConfig()):
        if 1 in bits:
            assert bits.index(1) >= 3


def test_tail_rule_blocks_late_turn_on():
    s = _state(n_on=3, n_off=3)
    for bits in admissible_trajectories(s, HorizonConfig()):
        starts = [j for j in range(6) if bits[j] == 1 and (j == 0 or bits[j - 1] == 0)]
        assert all(j <= 3 for j in starts)


def test_enumeration_is_deterministic(horizon):
    s = _state(n_on=3, n_off=4)
    assert admissible_trajectories(s, horizon) == admissible_trajectories(s, horizon)


def test_count_transitions():
    assert count_transitions((0, 1, 1, 0), 0) == 2
    assert count_transitions((1, 1), 1) == 0
    assert count_transitions((0,), 1) == 1


# ---------------------------------------------------------------------------
# Combinations
# ---------------------------------------------------------------------------

def test_combination_space_order_and_size():
    per_load = [[(0,), (1,), (2,)], [(0,), (1,)], [(0,)]]
    schedules = list(enumerate_combinations(per_load))
    assert len(schedules) == 6
    assert [s.bits for s in schedules] == [
        ((a,), (b,), (0,)) for a in range(3) for b in range(2)
    ]

    space = CombinationSpace(per_load)
    assert len(space) == 6
    for i, sched in enumerate(space):
        assert space.schedule_at(i) == sched
    with pytest.raises(IndexError):
        space.schedule_at(6)


def test_single_load_space():
    trajs = [(0, 0), (0, 1), (1, 1)]
    assert [s.bits[0] for s in CombinationSpace([trajs])] == trajs


def test_empty_per_load_rejected():
    with pytest.raises(HorizonError):
        CombinationSpace([[(0,)], []])
    with pytest.raises(HorizonError):
        CombinationSpace([])


def test_partition_covers_space_in_order():
    space = CombinationSpace([[(0,)] * 7, [(1,)] * 11])
    for parts in (1, 2, 3, 4, 77, 500):
        ranges = space.partition(parts)
        assert ranges[0].start == 0 and ranges[-1].stop == 77
        assert all(a.stop == b.start for a, b in zip(ranges, ranges[1:]))
        assert all(len(r) > 0 for r in ranges)


def test_joint_enumeration_matches_joint_bruteforce(reference_specs, horizon):
    dwell = horizon.validate_loads(reference_specs)
    states = [LoadSwitchState.initial(s.id, on, off) for s, (on, off) in zip(reference_specs, dwell)]
    enumerated = {s.bits for s in CombinationSpace([admissible_trajectories(st, horizon) for st in states])}

    rows = list(itertools.product((0, 1), repeat=horizon.n_steps))
    ok = [[r for r in rows if is_admissible(r, st, horizon)] for st in states]
    joint = {
        combo
        for combo in itertools.product(rows, repeat=3)
        if all(r in ok[i] for i, r in enumerate(combo))
    }
    assert enumerated == joint
    assert len(joint) == 308


def test_schedule_accessors():
    sched = SwitchSchedule(bits=((0, 1, 1), (1, 1, 0)))
    assert sched.n_loads == 2 and sched.n_steps == 3
    assert sched.first_column == (0, 1)
    assert sched.transitions((0, 0)) == 3
    assert sched.as_strings() == ["011", "110"]
    assert sched.array.dtype == np.int8


def test_cardinality_bound():
    assert cardinality_bound(3, 6) == 32768
    assert cardinality_bound_check(0, 3, 6)
    assert not cardinality_bound_check(2, 1, 2)


# ---------------------------------------------------------------------------
# Post-hoc dwell checker
# ---------------------------------------------------------------------------

def test_dwell_checker_accepts_admissible_history():
    applied = np.array([[0, 0], [1, 0], [1, 0], [1, 1], [0, 1], [0, 1], [0, 0]])
    assert check_dwell_times(applied, [(3, 3), (2, 2)]) == []


def test_dwell_checker_flags_short_runs():
    applied = np.array([[1], [1], [0], [0], [0], [1]])
    violations = check_dwell_times(applied, [(3, 3)])
    assert len(violations) == 1
    v = violations[0]
    assert (v.load_position, v.start_step, v.length, v.required, v.state) == (0, 0, 2, 3, 1)


def test_dwell_checker_allows_truncated_final_run():
    applied = np.array([[0], [1]])
    assert check_dwell_times(applied, [(5, 5)]) == []


def test_dwell_checker_shape_errors():
    with pytest.raises(ValueError):
        check_dwell_times(np.zeros(3), [(1, 1)])
    with pytest.raises(ValueError):
        check_dwell_times(np.zeros((3, 2)), [(1, 1)])
