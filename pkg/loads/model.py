from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from utils.logging import get_logger

_LOG = get_logger("loads.model")

_CONJ_TOL = 1e-9


class LoadModelError(ValueError):
    """Raised for invalid load specifications or switching signals."""


def _check_poles(poles: Sequence[complex]) -> tuple[complex, ...]:
    if len(poles) == 0:
        raise LoadModelError("At least one pole is required")
    normalized = tuple(complex(p) for p in poles)
    for p in normalized:
        if not np.isfinite(p.real) or not np.isfinite(p.imag):
            raise LoadModelError(f"Pole {p} is not finite")
        if p.real >= 0:
            raise LoadModelError(f"Pole {p} is not strictly stable (Re(p) must be < 0)")

    remaining = list(normalized)
    while remaining:
        p = remaining.pop(0)
        if abs(p.imag) <= _CONJ_TOL:
            continue
        match = next((i for i, q in enumerate(remaining) if abs(q - p.conjugate()) <= _CONJ_TOL), None)
        if match is None:
            raise LoadModelError(f"Complex pole {p} has no conjugate partner")
        remaining.pop(match)
    return normalized


@dataclass(frozen=True)
class LoadSpec:
    """Static description of one switchable load.

    Power demand is per-unit; poles are in rad/s; dwell times are in seconds.
    """

    id: int
    size_pu: float
    poles_on: tuple[complex, ...]
    poles_off: tuple[complex, ...]
    t_on_min_s: float
    t_off_min_s: float

    def __post_init__(self) -> None:
        if not self.size_pu > 0:
            raise LoadModelError(f"Load {self.id}: size_pu must be > 0, got {self.size_pu}")
        if not self.t_on_min_s > 0 or not self.t_off_min_s > 0:
            raise LoadModelError(f"Load {self.id}: minimum on/off times must be > 0")
        object.__setattr__(self, "poles_on", _check_poles(self.poles_on))
        object.__setattr__(self, "poles_off", _check_poles(self.poles_off))

    @property
    def dominant_time_constant_s(self) -> float:
        slowest = min(abs(p.real) for p in self.poles_on + self.poles_off)
        return 1.0 / slowest

    def scaled(self, factor: float) -> "LoadSpec":
        return LoadSpec(
            id=self.id,
            size_pu=self.size_pu * factor,
            poles_on=self.poles_on,
            poles_off=self.poles_off,
            t_on_min_s=self.t_on_min_s,
            t_off_min_s=self.t_off_min_s,
        )


@dataclass(frozen=True)
class StateSpace:
    """Single-input single-output realization. ``dt`` is None for continuous time."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    dt: Optional[float] = None

    @property
    def order(self) -> int:
        return self.A.shape[0]

    @property
    def is_discrete(self) -> bool:
        return self.dt is not None

    def poles(self) -> np.ndarray:
        return np.linalg.eigvals(self.A)

    def dc_gain(self) -> float:
        n = self.order
        if self.is_discrete:
            gain = self.C @ np.linalg.solve(np.eye(n) - self.A, self.B) + self.D
        else:
            gain = self.D - self.C @ np.linalg.solve(self.A, self.B)
        return float(gain[0, 0])


def build_continuous(poles: Sequence[complex]) -> StateSpace:
    """All-pole realization K / prod(s - p_j) normalized to unity DC gain.

    Controllable canonical form with the gain in C, so the first state is
    output / K and the remaining states are its successive derivatives.
    """
    checked = _check_poles(poles)
    den = np.real_if_close(np.poly(checked), tol=1000)
    if np.iscomplexobj(den):
        raise LoadModelError(f"Poles {checked} do not form a real polynomial")
    den = den.astype(float)
    n = len(den) - 1
    K = den[-1]

    A = np.zeros((n, n))
    A[:-1, 1:] = np.eye(n - 1)
    A[-1, :] = -den[:0:-1]
    B = np.zeros((n, 1))
    B[-1, 0] = 1.0
    C = np.zeros((1, n))
    C[0, 0] = K
    D = np.zeros((1, 1))
    return StateSpace(A=A, B=B, C=C, D=D)


def zoh_discretize(cont: StateSpace, dt_s: float) -> StateSpace:
    """Exact zero-order-hold equivalent via the augmented matrix exponential."""
    if cont.is_discrete:
        raise LoadModelError("Model is already discrete")
    if not dt_s > 0:
        raise LoadModelError(f"Sampling time must be > 0, got {dt_s}")
    n = cont.order
    m = cont.B.shape[1]

    # M = [A  B]      e^(M dt) = [Ad  Bd]
    #     [0  0]                 [ 0   I]
    M = np.block([[cont.A, cont.B], [np.zeros((m, n)), np.zeros((m, m))]])
    phi = expm(M * dt_s)
    return StateSpace(A=phi[:n, :n], B=phi[:n, n:], C=cont.C.copy(), D=cont.D.copy(), dt=dt_s)


def handoff_state(incoming: StateSpace, output: float) -> np.ndarray:
    """Minimum-norm state of ``incoming`` whose (unscaled) output equals ``output``.

    With the canonical realization this puts the whole value in the first
    state and leaves every output derivative at zero.
    """
    c = incoming.C[0]
    return c * (output / float(c @ c))


@dataclass
class _IntervalResponse:
    free: np.ndarray  # (steps, order): C A^j
    forced: np.ndarray  # (steps,): C sum_{i<j} A^i B
    A_end: np.ndarray  # A^steps
    B_end: np.ndarray  # sum_{i<steps} A^i B


def _interval_response(ss: StateSpace, steps: int) -> _IntervalResponse:
    n = ss.order
    free = np.empty((steps, n))
    forced = np.empty(steps)
    Ak = np.eye(n)
    acc = np.zeros(n)
    b = ss.B[:, 0]
    for j in range(steps):
        free[j] = ss.C[0] @ Ak
        forced[j] = ss.C[0] @ acc
        acc = ss.A @ acc + b
        Ak = ss.A @ Ak
    return _IntervalResponse(free=free, forced=forced, A_end=Ak, B_end=acc)


@dataclass
class DiscreteLoadModel:
    """ZOH load model plus its live simulation state.

    ``last_on_idx`` / ``last_off_idx`` are fine-step indices of the latest
    transitions, None when the load never switched.
    """

    spec: LoadSpec
    ss_on: StateSpace
    ss_off: StateSpace
    state: np.ndarray
    active: int = 0
    last_on_idx: Optional[int] = None
    last_off_idx: Optional[int] = None
    step_idx: int = 0
    _intervals: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_spec(cls, spec: LoadSpec, dt_s: float = 1.0) -> "DiscreteLoadModel":
        ss_on = zoh_discretize(build_continuous(spec.poles_on), dt_s)
        ss_off = zoh_discretize(build_continuous(spec.poles_off), dt_s)
        _LOG.debug(
            "Discretized load model",
            load=spec.id,
            order_on=ss_on.order,
            order_off=ss_off.order,
            dt_s=dt_s,
        )
        return cls(spec=spec, ss_on=ss_on, ss_off=ss_off, state=np.zeros(ss_off.order))

    @property
    def dt_s(self) -> float:
        return float(self.ss_on.dt)  # type: ignore[arg-type]

    def model_for(self, active: int) -> StateSpace:
        return self.ss_on if active else self.ss_off

    @property
    def active_model(self) -> StateSpace:
        return self.model_for(self.active)

    def output(self) -> float:
        """Current power demand in PU."""
        return self.spec.size_pu * float(self.active_model.C[0] @ self.state)

    def copy(self) -> "DiscreteLoadModel":
        return DiscreteLoadModel(
            spec=self.spec,
            ss_on=self.ss_on,
            ss_off=self.ss_off,
            state=self.state.copy(),
            active=self.active,
            last_on_idx=self.last_on_idx,
            last_off_idx=self.last_off_idx,
            step_idx=self.step_idx,
            _intervals=self._intervals,
        )

    def switch_to(self, active: int) -> None:
        """Change the active model, handing off state so the output stays continuous."""
        if active == self.active:
            return
        y = float(self.active_model.C[0] @ self.state)
        self.state = handoff_state(self.model_for(active), y)
        self.active = active
        if active:
            self.last_on_idx = self.step_idx
        else:
            self.last_off_idx = self.step_idx

    # Interval fast path: free/forced responses over a whole hold interval.

    def interval(self, active: int, steps: int) -> _IntervalResponse:
        key = (active, steps)
        cached = self._intervals.get(key)
        if cached is None:
            cached = _interval_response(self.model_for(active), steps)
            self._intervals[key] = cached
        return cached

    def propagate_interval(
        self, state: np.ndarray, active: int, bit: int, steps: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Hold ``bit`` for ``steps`` fine samples from (state, active) without touching live state.

        Returns (power samples in PU, state after the interval).
        """
        if bit != active:
            y = float(self.model_for(active).C[0] @ state)
            state = handoff_state(self.model_for(bit), y)
        resp = self.interval(bit, steps)
        power = resp.free @ state
        next_state = resp.A_end @ state
        if bit:
            power = power + resp.forced
            next_state = next_state + resp.B_end
        return self.spec.size_pu * power, next_state


def _as_switch_signal(w: Iterable[int]) -> np.ndarray:
    arr = np.asarray(list(w) if not isinstance(w, np.ndarray) else w)
    if arr.ndim != 1:
        raise LoadModelError(f"Switch signal must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        bad = arr[(arr != 0) & (arr != 1)][0]
        raise LoadModelError(f"Switch signal must be binary, found {bad!r}")
    return arr.astype(np.int8)


def simulate_switched(
    model: DiscreteLoadModel, w: Sequence[int], expected_len: Optional[int] = None
) -> np.ndarray:
    """Advance ``model`` over the fine-grid switch signal ``w`` and return p_i(t_k) in PU.

    The output at step k is read before the state update, so a transition
    at k leaves p_i(t_k) equal to the outgoing model's value.
    """
    sig = _as_switch_signal(w)
    if expected_len is not None and sig.size != expected_len:
        raise LoadModelError(f"Switch signal length {sig.size} does not match expected {expected_len}")

    out = np.empty(sig.size)
    size = model.spec.size_pu
    for k, bit in enumerate(sig):
        bit = int(bit)
        if bit != model.active:
            model.switch_to(bit)
        ss = model.active_model
        out[k] = size * float(ss.C[0] @ model.state)
        model.state = ss.A @ model.state + ss.B[:, 0] * bit
        model.step_idx += 1
    return out


def steady_state_power(spec: LoadSpec) -> float:
    return spec.size_pu


@dataclass(frozen=True)
class StepResponseMetrics:
    peak_pu: float
    overshoot: float
    settle_time_s: Optional[float]
    final_pu: float


def step_response_metrics(
    times_s: np.ndarray, power_pu: np.ndarray, size_pu: float, *, band: float = 0.01
) -> StepResponseMetrics:
    """Peak, fractional overshoot over ``size_pu`` and 1% settling time of an on-step response."""
    times_s = np.asarray(times_s, dtype=float)
    power_pu = np.asarray(power_pu, dtype=float)
    if power_pu.size == 0:
        return StepResponseMetrics(peak_pu=0.0, overshoot=0.0, settle_time_s=None, final_pu=0.0)
    peak = float(power_pu.max())
    outside = np.flatnonzero(np.abs(power_pu - size_pu) > band * size_pu)
    if outside.size == 0:
        settle = float(times_s[0])
    elif outside[-1] + 1 < power_pu.size:
        settle = float(times_s[outside[-1] + 1])
    else:
        settle = None
    return StepResponseMetrics(
        peak_pu=peak,
        overshoot=max(0.0, peak / size_pu - 1.0),
        settle_time_s=settle,
        final_pu=float(power_pu[-1]),
    )
