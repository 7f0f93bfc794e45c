from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

BARRIER_NAMES = ("B1", "B2", "B3", "B4")


class BatteryError(ValueError):
    """Raised for invalid battery parameters or misaligned inputs."""


@dataclass(frozen=True)
class BatterySpec:
    """Battery normalizations and barrier weights.

    p_norm turns tracking error into a fraction of the power limit (1/PU);
    s_norm turns integrated error into state of charge (1/(PU*s)).
    """

    p_norm: float = 2.0
    s_norm: float = 1.0 / 1800.0
    soc_lo: float = 0.1
    soc_hi: float = 0.9
    c1: float = 10.0
    c2: float = 1000.0
    c3: float = 10.0
    c4: float = 10.0

    def __post_init__(self) -> None:
        if not self.p_norm > 0:
            raise BatteryError(f"p_norm must be > 0, got {self.p_norm}")
        if not self.s_norm > 0:
            raise BatteryError(f"s_norm must be > 0, got {self.s_norm}")
        if not 0.0 <= self.soc_lo < self.soc_hi <= 1.0:
            raise BatteryError(f"Need 0 <= soc_lo < soc_hi <= 1, got {self.soc_lo}, {self.soc_hi}")
        if min(self.c1, self.c2, self.c3, self.c4) < 0:
            raise BatteryError("Barrier weights must be nonnegative")

    @property
    def weights(self) -> np.ndarray:
        return np.array([self.c1, self.c2, self.c3, self.c4])

    @property
    def power_limit_pu(self) -> float:
        return 1.0 / self.p_norm

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any]) -> "BatterySpec":
        kwargs: dict[str, float] = {}
        for key in ("p_norm", "s_norm", "soc_lo", "soc_hi"):
            if key in raw:
                kwargs[key] = float(raw[key])
        if "c" in raw:
            c = list(raw["c"])
            if len(c) != 4:
                raise BatteryError(f"'c' must hold 4 barrier weights, got {len(c)}")
            kwargs.update(c1=float(c[0]), c2=float(c[1]), c3=float(c[2]), c4=float(c[3]))
        return cls(**kwargs)

    def to_mapping(self) -> dict:
        return {
            "p_norm": self.p_norm,
            "s_norm": self.s_norm,
            "soc_lo": self.soc_lo,
            "soc_hi": self.soc_hi,
            "c": [self.c1, self.c2, self.c3, self.c4],
        }


@dataclass(frozen=True)
class BatteryState:
    soc: float = 0.5

    def __post_init__(self) -> None:
        if not 0.0 <= self.soc <= 1.0:
            raise BatteryError(f"State of charge must be within [0, 1], got {self.soc}")


def soc_from_charge(soc0: float, charge: np.ndarray, spec: BatterySpec, dt_s: float) -> np.ndarray:
    """SOC from the running sum of tracking error (PU samples)."""
    return soc0 + spec.s_norm * dt_s * charge


def soc_trajectory(soc0: float, e: np.ndarray, spec: BatterySpec, dt_s: float) -> np.ndarray:
    """soc(m) = soc0 + S*dt*sum_{j<=m} e(t_j) along the last axis; positive e charges. Not clamped."""
    e = np.asarray(e, dtype=float)
    if not np.all(np.isfinite(e)):
        raise BatteryError("Tracking error must be finite")
    return soc_from_charge(soc0, np.cumsum(e, axis=-1), spec, dt_s)


def barrier_terms(e: np.ndarray, soc_traj: np.ndarray, spec: BatterySpec) -> np.ndarray:
    """B1..B4 over the last axis; shape (..., 4), each linear beyond its bound.

    B1 charges the worst power overrun of the horizon. B2..B4 add up the SOC
    excursion of every sample, so a trajectory heading back into the band
    scores lower than one that stays out, and a mid-horizon excursion counts
    even when the horizon ends in range.
    """
    e = np.asarray(e, dtype=float)
    soc_traj = np.asarray(soc_traj, dtype=float)
    if e.shape != soc_traj.shape:
        raise BatteryError(f"Error shape {e.shape} does not match SOC shape {soc_traj.shape}")
    lead = e.shape[:-1]
    if e.shape[-1] == 0:
        return np.zeros(lead + (4,))

    peak = spec.p_norm * np.max(np.abs(e), axis=-1)

    terms = np.empty(lead + (4,))
    terms[..., 0] = spec.c1 * np.maximum(0.0, peak - 1.0)
    terms[..., 1] = spec.c2 * np.sum(np.maximum(0.0, -soc_traj), axis=-1)
    terms[..., 2] = spec.c3 * np.sum(np.maximum(0.0, soc_traj - spec.soc_hi), axis=-1)
    terms[..., 3] = spec.c4 * np.sum(np.maximum(0.0, spec.soc_lo - soc_traj), axis=-1)
    return terms


def barrier_penalty(e: np.ndarray, soc_traj: np.ndarray, spec: BatterySpec) -> float:
    return float(np.sum(barrier_terms(e, soc_traj, spec)))


def check_power_constraint(e: np.ndarray, spec: BatterySpec) -> tuple[bool, float]:
    """(P*max|e| < 1, P*max|e|)."""
    e = np.asarray(e, dtype=float)
    if e.size == 0:
        return True, 0.0
    peak = float(spec.p_norm * np.max(np.abs(e)))
    return peak < 1.0, peak
