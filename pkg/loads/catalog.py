from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable

from loads.model import LoadModelError, LoadSpec
from utils.logging import get_logger

_LOG = get_logger("loads.catalog")

_REQUIRED_KEYS = ("id", "size_pu", "poles_on", "poles_off", "t_on_min_s", "t_off_min_s")


def _parse_pole(raw: Any, *, load_id: Any) -> complex:
    if isinstance(raw, (int, float)):
        return complex(float(raw), 0.0)
    if isinstance(raw, (list, tuple)) and len(raw) == 2:
        try:
            return complex(float(raw[0]), float(raw[1]))
        except (TypeError, ValueError) as exc:
            raise LoadModelError(f"Load {load_id}: pole {raw!r} is not numeric") from exc
    raise LoadModelError(f"Load {load_id}: pole {raw!r} must be [re, im]")


def spec_from_dict(entry: dict) -> LoadSpec:
    missing = [k for k in _REQUIRED_KEYS if k not in entry]
    if missing:
        raise LoadModelError(f"Load entry missing keys: {', '.join(missing)}")
    load_id = entry["id"]
    try:
        return LoadSpec(
            id=int(load_id),
            size_pu=float(entry["size_pu"]),
            poles_on=tuple(_parse_pole(p, load_id=load_id) for p in entry["poles_on"]),
            poles_off=tuple(_parse_pole(p, load_id=load_id) for p in entry["poles_off"]),
            t_on_min_s=float(entry["t_on_min_s"]),
            t_off_min_s=float(entry["t_off_min_s"]),
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, LoadModelError):
            raise
        raise LoadModelError(f"Load {load_id}: {exc}") from exc


def spec_to_dict(spec: LoadSpec) -> dict:
    return {
        "id": spec.id,
        "size_pu": spec.size_pu,
        "poles_on": [[p.real, p.imag] for p in spec.poles_on],
        "poles_off": [[p.real, p.imag] for p in spec.poles_off],
        "t_on_min_s": spec.t_on_min_s,
        "t_off_min_s": spec.t_off_min_s,
    }


def read_loads(path: str | Path) -> list[LoadSpec]:
    """Read a JSON array of load objects. Ids must be unique."""
    target = Path(path)
    try:
        raw = json.loads(target.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise LoadModelError(f"Loads file not found: {target}") from exc
    except json.JSONDecodeError as exc:
        raise LoadModelError(f"Loads file {target} is not valid JSON: {exc}") from exc

    if not isinstance(raw, list) or not raw:
        raise LoadModelError(f"Loads file {target} must contain a non-empty JSON array")

    specs = [spec_from_dict(entry) for entry in raw]
    ids = [s.id for s in specs]
    if len(set(ids)) != len(ids):
        raise LoadModelError(f"Loads file {target} has duplicate ids: {ids}")
    _LOG.info("Loaded load specifications", path=str(target), count=len(specs))
    return specs


def write_loads(specs: Iterable[LoadSpec], path: str | Path) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = [spec_to_dict(s) for s in specs]
    target.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return target
