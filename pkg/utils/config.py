from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping, Optional

from dotenv import load_dotenv

from battery.constraints import BatteryError, BatterySpec
from switching.switchset import HorizonConfig, HorizonError
from utils.logging import get_logger

_LOG = get_logger("utils.config")

_SYNTHETIC_KEYS = ("duration_s", "peak_pu", "seed", "noise_level")


class ConfigError(ValueError):
    """Raised for missing or invalid run configuration."""


@dataclass(frozen=True)
class SyntheticForecast:
    duration_s: float = 14400.0
    peak_pu: float = 1.0
    seed: int = 42
    noise_level: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    loads_path: Path
    forecast_csv: Optional[Path] = None
    synthetic: Optional[SyntheticForecast] = None
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    battery: BatterySpec = field(default_factory=BatterySpec)
    soc_init: float = 0.5
    output_dir: Path = Path("out")
    workers: int = 0
    pad_forecast: bool = True
    step_budget_s: float = 0.3

    def __post_init__(self) -> None:
        if (self.forecast_csv is None) == (self.synthetic is None):
            raise ConfigError("Forecast must name exactly one of 'csv_path' or 'synthetic'")
        if not 0.0 <= self.soc_init <= 1.0:
            raise ConfigError(f"soc_init must be within [0, 1], got {self.soc_init}")
        if self.workers < 0:
            raise ConfigError(f"workers must be >= 0, got {self.workers}")

    def check_files(self) -> None:
        """Referenced files must exist at run time."""
        if not self.loads_path.is_file():
            raise ConfigError(f"Loads file not found: {self.loads_path}")
        if self.forecast_csv is not None and not self.forecast_csv.is_file():
            raise ConfigError(f"Forecast CSV not found: {self.forecast_csv}")


def _resolve(base: Path, raw: Any, *, what: str) -> Path:
    if not isinstance(raw, str) or not raw:
        raise ConfigError(f"'{what}' must be a non-empty path string")
    path = Path(raw).expanduser()
    return path if path.is_absolute() else (base / path).resolve()


def _as_int(raw: Any, *, what: str) -> int:
    try:
        return int(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{what}' must be an integer, got {raw!r}") from exc


def _as_float(raw: Any, *, what: str) -> float:
    if isinstance(raw, bool):
        raise ConfigError(f"'{what}' must be a number, got {raw!r}")
    try:
        return float(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"'{what}' must be a number, got {raw!r}") from exc


def _as_bool(raw: Any, *, what: str) -> bool:
    if not isinstance(raw, bool):
        raise ConfigError(f"'{what}' must be true or false, got {raw!r}")
    return raw


def _synthetic(raw: Mapping[str, Any]) -> SyntheticForecast:
    unknown = set(raw) - set(_SYNTHETIC_KEYS)
    if unknown:
        raise ConfigError(f"Unknown synthetic forecast keys: {', '.join(sorted(unknown))}")
    try:
        return SyntheticForecast(
            duration_s=float(raw.get("duration_s", 14400.0)),
            peak_pu=float(raw.get("peak_pu", 1.0)),
            seed=int(raw.get("seed", 42)),
            noise_level=float(raw.get("noise_level", 0.1)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid synthetic forecast block: {exc}") from exc


def run_config_from_dict(raw: Mapping[str, Any], base_dir: Path) -> RunConfig:
    if "loads_path" not in raw:
        raise ConfigError("Missing 'loads_path'")
    forecast = raw.get("forecast")
    if not isinstance(forecast, Mapping):
        raise ConfigError("Missing 'forecast' block")

    csv_path = _resolve(base_dir, forecast["csv_path"], what="forecast.csv_path") if "csv_path" in forecast else None
    synthetic = _synthetic(forecast["synthetic"]) if "synthetic" in forecast else None

    horizon_raw = dict(raw.get("horizon", {}))
    battery_raw = dict(raw.get("battery", {}))
    soc_init = _as_float(battery_raw.pop("soc_init", raw.get("soc_init", 0.5)), what="battery.soc_init")
    try:
        horizon = HorizonConfig(
            n_steps=_as_int(horizon_raw.get("n_steps", 6), what="horizon.n_steps"),
            ctrl_interval_s=_as_float(horizon_raw.get("ctrl_interval_s", 60.0), what="horizon.ctrl_interval_s"),
            fine_dt_s=_as_float(horizon_raw.get("fine_dt_s", 1.0), what="horizon.fine_dt_s"),
        )
        battery = BatterySpec.from_mapping(battery_raw)
    except ConfigError:
        raise
    except (HorizonError, BatteryError) as exc:
        raise ConfigError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid battery block: {exc}") from exc
    step_budget_s = _as_float(raw.get("step_budget_s", 0.3), what="step_budget_s")
    if not step_budget_s > 0:
        raise ConfigError(f"step_budget_s must be > 0, got {step_budget_s}")

    return RunConfig(
        loads_path=_resolve(base_dir, raw["loads_path"], what="loads_path"),
        forecast_csv=csv_path,
        synthetic=synthetic,
        horizon=horizon,
        battery=battery,
        soc_init=soc_init,
        output_dir=_resolve(base_dir, raw.get("output_dir", "out"), what="output_dir"),
        workers=_as_int(raw.get("workers", 0), what="workers"),
        pad_forecast=_as_bool(raw.get("pad_forecast", True), what="pad_forecast"),
        step_budget_s=step_budget_s,
    )


def load_run_config(path: str | Path, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read a JSON run config, then apply env overrides and finally explicit overrides.

    Env: SCHED_WORKERS, SCHED_OUTPUT_DIR (a .env file is honored).
    Overrides: ``workers``, ``output_dir``, ``seed``, ``soc_init``; None values are ignored.
    """
    src = Path(path)
    try:
        raw = json.loads(src.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file not found: {src}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"Cannot read config {src}: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ConfigError(f"Config {src} must be a JSON object")

    cfg = run_config_from_dict(raw, src.resolve().parent)

    load_dotenv()
    env_workers = os.getenv("SCHED_WORKERS")
    if env_workers:
        cfg = replace(cfg, workers=_as_int(env_workers, what="SCHED_WORKERS"))
    env_out = os.getenv("SCHED_OUTPUT_DIR")
    if env_out:
        cfg = replace(cfg, output_dir=Path(env_out).expanduser().resolve())

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "workers":
            cfg = replace(cfg, workers=_as_int(value, what="workers"))
        elif key == "output_dir":
            cfg = replace(cfg, output_dir=Path(value).expanduser().resolve())
        elif key == "soc_init":
            cfg = replace(cfg, soc_init=_as_float(value, what="soc_init"))
        elif key == "seed":
            if cfg.synthetic is None:
                _LOG.warning("Seed override ignored for a CSV forecast", seed=value)
            else:
                cfg = replace(cfg, synthetic=replace(cfg.synthetic, seed=int(value)))
        else:
            raise ConfigError(f"Unknown override '{key}'")

    _LOG.debug("Run config loaded", path=str(src), workers=cfg.workers, output_dir=str(cfg.output_dir))
    return cfg
