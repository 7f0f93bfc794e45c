from __future__ import annotations

from pathlib import Path

import pytest

from battery.constraints import BatterySpec
from loads.catalog import read_loads
from loads.model import LoadSpec
from switching.switchset import HorizonConfig

ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = ROOT / "config"


@pytest.fixture
def reference_path() -> Path:
    return CONFIG_DIR / "loads_reference.json"


@pytest.fixture
def reference_specs(reference_path) -> list[LoadSpec]:
    return read_loads(reference_path)


@pytest.fixture
def horizon() -> HorizonConfig:
    return HorizonConfig()


@pytest.fixture
def small_horizon() -> HorizonConfig:
    """Three 10 s control steps on a 1 s grid."""
    return HorizonConfig(n_steps=3, ctrl_interval_s=10.0, fine_dt_s=1.0)


@pytest.fixture
def battery() -> BatterySpec:
    return BatterySpec()


@pytest.fixture
def toy_specs() -> list[LoadSpec]:
    """Two fast loads whose dwell fits the small horizon."""
    return [
        LoadSpec(id=1, size_pu=0.5, poles_on=(-0.2,), poles_off=(-0.3,), t_on_min_s=10.0, t_off_min_s=10.0),
        LoadSpec(
            id=2,
            size_pu=0.3,
            poles_on=(complex(-0.3, 0.4), complex(-0.3, -0.4)),
            poles_off=(-0.5,),
            t_on_min_s=20.0,
            t_off_min_s=10.0,
        ),
    ]
