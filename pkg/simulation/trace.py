from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import pandas as pd

from battery.constraints import BARRIER_NAMES, BatterySpec
from switching.history import check_dwell_times
from utils.logging import get_logger

_LOG = get_logger("simulation.trace")

TRACE_FILE = "trace.csv"
STEPS_FILE = "steps.csv"
SUMMARY_FILE = "summary.json"


class TraceIOError(OSError):
    """Raised when trace files cannot be written or read."""

    def __init__(self, message: str, path: Path) -> None:
        super().__init__(f"{message}: {path}")
        self.path = path


@dataclass
class SimTrace:
    """Closed-loop record: fine-grid signals plus per-control-step diagnostics."""

    load_ids: tuple[int, ...]
    fine_dt_s: float
    ctrl_interval_s: float
    t_s: np.ndarray
    forecast_pu: np.ndarray
    load_power_pu: np.ndarray  # (fine samples, loads)
    total_p_pu: np.ndarray
    e_pu: np.ndarray
    battery_power_pu: np.ndarray
    soc: np.ndarray
    step_t_s: np.ndarray
    applied: np.ndarray  # (control steps, loads)
    candidate_count: np.ndarray
    step_wall_time_s: np.ndarray
    step_cost: np.ndarray
    active_barriers: list[str] = field(default_factory=list)
    padded: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @classmethod
    def empty(cls, load_ids: Sequence[int], fine_dt_s: float, ctrl_interval_s: float) -> "SimTrace":
        n = len(load_ids)
        return cls(
            load_ids=tuple(load_ids),
            fine_dt_s=fine_dt_s,
            ctrl_interval_s=ctrl_interval_s,
            t_s=np.zeros(0),
            forecast_pu=np.zeros(0),
            load_power_pu=np.zeros((0, n)),
            total_p_pu=np.zeros(0),
            e_pu=np.zeros(0),
            battery_power_pu=np.zeros(0),
            soc=np.zeros(0),
            step_t_s=np.zeros(0),
            applied=np.zeros((0, n), dtype=np.int8),
            candidate_count=np.zeros(0, dtype=np.int64),
            step_wall_time_s=np.zeros(0),
            step_cost=np.zeros(0),
            active_barriers=[],
            padded=np.zeros(0, dtype=bool),
        )

    @property
    def n_fine(self) -> int:
        return int(self.t_s.size)

    @property
    def n_steps(self) -> int:
        return int(self.step_t_s.size)

    def fine_frame(self) -> pd.DataFrame:
        data: dict[str, Any] = {"t_s": self.t_s, "forecast_pu": self.forecast_pu}
        for col, load_id in enumerate(self.load_ids):
            data[f"p_{load_id}_pu"] = self.load_power_pu[:, col]
        data.update(
            total_p_pu=self.total_p_pu,
            e_pu=self.e_pu,
            battery_power_pu=self.battery_power_pu,
            soc=self.soc,
        )
        return pd.DataFrame(data)

    def steps_frame(self) -> pd.DataFrame:
        data: dict[str, Any] = {"step": np.arange(self.n_steps), "t_s": self.step_t_s}
        for col, load_id in enumerate(self.load_ids):
            data[f"w_{load_id}"] = self.applied[:, col].astype(int)
        data.update(
            candidate_count=self.candidate_count,
            step_wall_time_s=self.step_wall_time_s,
            cost=self.step_cost,
            active_barriers=list(self.active_barriers),
            padded=self.padded.astype(bool),
        )
        return pd.DataFrame(data)


def first_in_band_time(t_s: np.ndarray, soc: np.ndarray, lo: float, hi: float) -> Optional[float]:
    """Earliest time after which SOC stays within [lo, hi]; None if it ends outside."""
    if soc.size == 0:
        return None
    outside = np.flatnonzero((soc < lo) | (soc > hi))
    if outside.size == 0:
        return float(t_s[0])
    if outside[-1] + 1 >= soc.size:
        return None
    return float(t_s[outside[-1] + 1])


def summarize(
    trace: SimTrace,
    battery: BatterySpec,
    *,
    soc_init: float,
    dwell_steps: Sequence[tuple[int, int]],
    step_budget_s: float = 0.3,
) -> dict:
    """Summary statistics for ``summary.json``; zeros for an empty run."""
    e = trace.e_pu
    soc = trace.soc
    ratio = battery.p_norm * np.abs(e) if e.size else np.zeros(0)
    times = trace.step_wall_time_s
    counts = trace.candidate_count
    barrier_counts = {name: 0 for name in BARRIER_NAMES}
    for entry in trace.active_barriers:
        for name in filter(None, entry.split("|")):
            barrier_counts[name] = barrier_counts.get(name, 0) + 1
    violations = check_dwell_times(trace.applied, dwell_steps) if trace.n_steps else []
    over_budget = int(np.sum(times > step_budget_s)) if times.size else 0
    median_step = float(np.median(times)) if times.size else 0.0

    return {
        "n_loads": len(trace.load_ids),
        "n_steps": trace.n_steps,
        "n_fine_samples": trace.n_fine,
        "min_soc": float(soc.min()) if soc.size else 0.0,
        "max_soc": float(soc.max()) if soc.size else 0.0,
        "final_soc": float(soc[-1]) if soc.size else 0.0,
        "max_abs_e": float(np.abs(e).max()) if e.size else 0.0,
        "max_power_ratio": float(ratio.max()) if ratio.size else 0.0,
        "power_limit_samples": int(np.sum(ratio >= 1.0)),
        "soc_below_lo_samples": int(np.sum(soc < battery.soc_lo)),
        "soc_above_hi_samples": int(np.sum(soc > battery.soc_hi)),
        "soc_negative_samples": int(np.sum(soc < 0.0)),
        "barrier_violation_counts": barrier_counts,
        "candidate_counts": {
            "min": int(counts.min()) if counts.size else 0,
            "max": int(counts.max()) if counts.size else 0,
            "mean": float(counts.mean()) if counts.size else 0.0,
            "total": int(counts.sum()) if counts.size else 0,
        },
        "total_wall_time_s": float(times.sum()) if times.size else 0.0,
        "median_step_time_s": median_step,
        "max_step_time_s": float(times.max()) if times.size else 0.0,
        "steps_over_budget": over_budget,
        "runtime_budget_exceeded": bool(median_step > 3 * step_budget_s),
        "padded_steps": int(np.sum(trace.padded)) if trace.padded.size else 0,
        "first_in_band_time_s": first_in_band_time(trace.t_s, soc, battery.soc_lo, battery.soc_hi),
        "dwell_violations": len(violations),
        "config": {
            "fine_dt_s": trace.fine_dt_s,
            "ctrl_interval_s": trace.ctrl_interval_s,
            "soc_init": soc_init,
            "step_budget_s": step_budget_s,
            "battery": battery.to_mapping(),
            "loads": [
                {"id": load_id, "n_on_min": on, "n_off_min": off}
                for load_id, (on, off) in zip(trace.load_ids, dwell_steps)
            ],
        },
    }


def write_trace(trace: SimTrace, output_dir: str | Path, summary: dict) -> dict[str, Path]:
    """Write trace.csv, steps.csv and summary.json into ``output_dir``."""
    out = Path(output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TraceIOError("Cannot create output directory", out) from exc

    paths = {"trace": out / TRACE_FILE, "steps": out / STEPS_FILE, "summary": out / SUMMARY_FILE}
    current = paths["trace"]
    try:
        trace.fine_frame().to_csv(current, index=False)
        current = paths["steps"]
        trace.steps_frame().to_csv(current, index=False)
        current = paths["summary"]
        current.write_text(json.dumps(summary, indent=2), encoding="utf-8")
    except OSError as exc:
        raise TraceIOError("Failed to write trace file", current) from exc

    _LOG.info("Trace written", path=str(out), fine_samples=trace.n_fine, steps=trace.n_steps)
    return paths


def _read_csv(path: Path) -> pd.DataFrame:
    try:
        return pd.read_csv(path, float_precision="round_trip", keep_default_na=False)
    except FileNotFoundError as exc:
        raise TraceIOError("Trace file not found", path) from exc
    except OSError as exc:
        raise TraceIOError("Failed to read trace file", path) from exc


def read_summary(output_dir: str | Path) -> dict:
    path = Path(output_dir) / SUMMARY_FILE
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise TraceIOError("Summary file not found", path) from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise TraceIOError("Failed to read summary file", path) from exc


def read_trace(output_dir: str | Path) -> SimTrace:
    out = Path(output_dir)
    fine = _read_csv(out / TRACE_FILE)
    steps = _read_csv(out / STEPS_FILE)
    summary = read_summary(out)
    cfg = summary.get("config", {})

    p_cols = [c for c in fine.columns if c.startswith("p_") and c.endswith("_pu")]
    load_ids = tuple(int(c[2:-3]) for c in p_cols)
    w_cols = [f"w_{load_id}" for load_id in load_ids]
    n = len(load_ids)
    barriers = steps["active_barriers"].astype(str).tolist() if len(steps) else []

    return SimTrace(
        load_ids=load_ids,
        fine_dt_s=float(cfg.get("fine_dt_s", 1.0)),
        ctrl_interval_s=float(cfg.get("ctrl_interval_s", 60.0)),
        t_s=fine["t_s"].to_numpy(dtype=float),
        forecast_pu=fine["forecast_pu"].to_numpy(dtype=float),
        load_power_pu=fine[p_cols].to_numpy(dtype=float).reshape(len(fine), n),
        total_p_pu=fine["total_p_pu"].to_numpy(dtype=float),
        e_pu=fine["e_pu"].to_numpy(dtype=float),
        battery_power_pu=fine["battery_power_pu"].to_numpy(dtype=float),
        soc=fine["soc"].to_numpy(dtype=float),
        step_t_s=steps["t_s"].to_numpy(dtype=float),
        applied=steps[w_cols].to_numpy(dtype=np.int8).reshape(len(steps), n),
        candidate_count=steps["candidate_count"].to_numpy(dtype=np.int64),
        step_wall_time_s=steps["step_wall_time_s"].to_numpy(dtype=float),
        step_cost=steps["cost"].to_numpy(dtype=float),
        active_barriers=[b if b != "nan" else "" for b in barriers],
        padded=steps["padded"].astype(str).str.lower().eq("true").to_numpy(),
    )


def validate_trace(
    trace: SimTrace,
    *,
    s_norm: float,
    soc_init: Optional[float] = None,
    dwell_steps: Optional[Sequence[tuple[int, int]]] = None,
    tol: float = 1e-9,
) -> list[str]:
    """Independent column-consistency and dwell check; returns human-readable issues."""
    issues: list[str] = []
    n = trace.n_fine

    for name in ("forecast_pu", "total_p_pu", "e_pu", "battery_power_pu", "soc"):
        if getattr(trace, name).shape != (n,):
            issues.append(f"{name} has shape {getattr(trace, name).shape}, expected ({n},)")
    if issues:
        return issues

    if n:
        load_sum = trace.load_power_pu.sum(axis=1)
        bad = np.flatnonzero(np.abs(load_sum - trace.total_p_pu) > tol)
        if bad.size:
            issues.append(f"total_p_pu != sum of load powers at {bad.size} samples (first t={trace.t_s[bad[0]]:g})")
        bad = np.flatnonzero(np.abs(trace.forecast_pu - trace.total_p_pu - trace.e_pu) > tol)
        if bad.size:
            issues.append(f"e_pu != forecast - total at {bad.size} samples (first t={trace.t_s[bad[0]]:g})")
        if not np.array_equal(trace.battery_power_pu, trace.e_pu):
            issues.append("battery_power_pu differs from e_pu")

        step = s_norm * trace.fine_dt_s
        increments = np.diff(trace.soc)
        bad = np.flatnonzero(np.abs(increments - step * trace.e_pu[1:]) > tol)
        if bad.size:
            issues.append(f"SOC increments inconsistent with e at {bad.size} samples (first t={trace.t_s[bad[0] + 1]:g})")
        if soc_init is not None and abs(trace.soc[0] - soc_init - step * trace.e_pu[0]) > tol:
            issues.append("First SOC sample inconsistent with the initial SOC")

    if trace.n_steps:
        per_step = round(trace.ctrl_interval_s / trace.fine_dt_s)
        if trace.n_steps * per_step != n:
            issues.append(f"{trace.n_steps} control steps do not cover {n} fine samples")
    if dwell_steps is not None and trace.n_steps:
        for v in check_dwell_times(trace.applied, dwell_steps):
            kind = "on" if v.state else "off"
            issues.append(
                f"Load {trace.load_ids[v.load_position]} {kind}-run at step {v.start_step} lasted {v.length} < {v.required}"
            )
    return issues
