from __future__ import annotations

import math
import re
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
from scipy.interpolate import PchipInterpolator

from scheduler.optimizer import ForecastSeries
from simulation.trace import TraceIOError
from utils.logging import get_logger

_LOG = get_logger("simulation.forecast")

HEADER = ("time_s", "power_pu")
SPACING_TOL = 1e-9


class ForecastError(ValueError):
    """Raised when a forecast cannot be generated or parsed. ``row`` is the 1-based data row."""

    def __init__(self, message: str, row: Optional[int] = None) -> None:
        super().__init__(message if row is None else f"row {row}: {message}")
        self.row = row


class MalformedRowError(ForecastError):
    pass


class NonUniformSpacingError(ForecastError):
    pass


class NegativePowerError(ForecastError):
    pass


def gen_solar_curve(
    duration_s: float,
    peak_pu: float = 1.0,
    seed: int = 42,
    noise_level: float = 0.1,
    *,
    dt_s: float = 1.0,
    noise_period_s: float = 600.0,
) -> ForecastSeries:
    """Irregular solar bell: half-sine over the run times smooth seeded noise, floored at 0.

    The noise is a monotone cubic through uniform knots in [-1, 1] spaced
    ``noise_period_s`` apart, so the multiplier stays in [1-nl, 1+nl].
    """
    if not duration_s > 0:
        raise ForecastError(f"duration_s must be > 0, got {duration_s}")
    if not 0.0 <= noise_level < 1.0:
        raise ForecastError(f"noise_level must be in [0, 1), got {noise_level}")
    if peak_pu < 0:
        raise ForecastError(f"peak_pu must be >= 0, got {peak_pu}")
    if not dt_s > 0 or not noise_period_s > 0:
        raise ForecastError("dt_s and noise_period_s must be > 0")

    n = int(round(duration_s / dt_s))
    t = np.arange(n) * dt_s
    bell = peak_pu * np.sin(np.pi * t / duration_s)

    if noise_level > 0:
        rng = np.random.default_rng(seed)
        n_knots = int(math.ceil(duration_s / noise_period_s)) + 1
        knots_t = np.arange(n_knots) * noise_period_s
        noise = PchipInterpolator(knots_t, rng.uniform(-1.0, 1.0, size=n_knots))(t)
        values = np.maximum(bell * (1.0 + noise_level * noise), 0.0)
    else:
        values = np.maximum(bell, 0.0)

    _LOG.debug("Synthetic forecast generated", samples=n, peak_pu=peak_pu, seed=seed, noise=noise_level)
    return ForecastSeries(dt_s=dt_s, values=values)


_PARSER_LINE = re.compile(r"line (\d+)")


def _parse_float(raw: str) -> float:
    try:
        return float(str(raw).strip())
    except ValueError:
        return math.nan


def load_forecast_csv(path: str | Path, dt_s: float = 1.0) -> ForecastSeries:
    """Parse a ``time_s,power_pu`` CSV into a series on the ``dt_s`` grid."""
    src = Path(path)
    if not src.is_file():
        raise ForecastError(f"Forecast file not found: {src}")
    try:
        df = pd.read_csv(src, dtype=str, keep_default_na=False, skipinitialspace=True, engine="python")
    except pd.errors.EmptyDataError as exc:
        raise ForecastError(f"Forecast file is empty: {src}") from exc
    except pd.errors.ParserError as exc:
        m = _PARSER_LINE.search(str(exc))
        row = int(m.group(1)) - 1 if m else None
        raise MalformedRowError("expected 2 fields", row=row) from exc

    columns = tuple(str(c).strip() for c in df.columns)
    if columns != HEADER:
        raise ForecastError(f"Expected header {','.join(HEADER)}, got {','.join(columns)}")
    if df.empty:
        raise ForecastError(f"Forecast file has no data rows: {src}")

    df = df.fillna("")
    times = df["time_s"].map(_parse_float).to_numpy(dtype=float)
    power = df["power_pu"].map(_parse_float).to_numpy(dtype=float)

    bad = np.flatnonzero(~(np.isfinite(times) & np.isfinite(power)))
    if bad.size:
        i = int(bad[0])
        raise MalformedRowError(
            f"cannot parse {df['time_s'].iloc[i]!r},{df['power_pu'].iloc[i]!r} as finite numbers", row=i + 1
        )

    negative = np.flatnonzero(power < 0)
    uneven = np.flatnonzero(np.abs(np.diff(times) - dt_s) > SPACING_TOL) + 1
    first_neg = int(negative[0]) if negative.size else None
    first_gap = int(uneven[0]) if uneven.size else None
    if first_neg is not None and (first_gap is None or first_neg <= first_gap):
        raise NegativePowerError(f"power {power[first_neg]:g} PU is negative", row=first_neg + 1)
    if first_gap is not None:
        step = times[first_gap] - times[first_gap - 1]
        raise NonUniformSpacingError(f"spacing {step:g} s differs from {dt_s:g} s", row=first_gap + 1)

    _LOG.info("Forecast loaded", path=str(src), samples=int(power.size), dt_s=dt_s)
    return ForecastSeries(dt_s=dt_s, values=power)


def write_forecast_csv(series: ForecastSeries, path: str | Path) -> Path:
    target = Path(path)
    df = pd.DataFrame({HEADER[0]: series.times_s, HEADER[1]: series.values})
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(target, index=False)
    except OSError as exc:
        raise TraceIOError("Failed to write forecast", target) from exc
    _LOG.info("Forecast written", path=str(target), samples=len(series))
    return target
