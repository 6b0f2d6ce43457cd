"""Engine configuration: nested dataclasses loaded from YAML with strict key checking."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import yaml

from .core import GridSpec, SensorModelParams, SensorMount, default_mounts
from .velocity_layer import MotionParams, ResampleParams, VelocityConfig, VelocityParams

MODES = ("full", "occupancy", "velocity")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    occupancy: GridSpec = field(default_factory=GridSpec)
    velocity: GridSpec = field(default_factory=lambda: GridSpec(cell_size=1.0))
    # metres of SP travel before the window follows; None means one occupancy cell
    scroll_threshold: Optional[float] = None


@dataclass(frozen=True)
class OccupancyConfig:
    representation: str = "bb"
    decay: float = 0.999
    l_max: float = 12.0
    # add the cell's own extent to the measurement spread when rasterising
    footprint: bool = True
    # "scan": one update per cell and sensor scan (max over detections); "detection": one per detection
    fusion: str = "scan"

    def __post_init__(self):
        if self.representation not in ("bb", "ds"):
            raise ValueError("representation must be 'bb' or 'ds'")
        if not 0 < self.decay <= 1:
            raise ValueError("decay must lie in (0, 1]")
        if self.fusion not in ("scan", "detection"):
            raise ValueError("fusion must be 'scan' or 'detection'")


@dataclass
class EngineConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    occupancy: OccupancyConfig = field(default_factory=OccupancyConfig)
    sensor_model: SensorModelParams = field(default_factory=SensorModelParams)
    velocity: VelocityConfig = field(default_factory=VelocityConfig)
    mounts: Tuple[SensorMount, ...] = field(default_factory=default_mounts)
    mode: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


_NESTED = {
    GridConfig: {"occupancy": GridSpec, "velocity": GridSpec},
    VelocityConfig: {"motion": MotionParams, "resample": ResampleParams, "params": VelocityParams},
    EngineConfig: {"grid": GridConfig, "occupancy": OccupancyConfig, "sensor_model": SensorModelParams,
                   "velocity": VelocityConfig},
}
_DEGREES = {"yaw_deg": "yaw", "fov_deg": "fov_azimuth"}


def build(cls, data: Optional[Dict[str, Any]], where: str = ""):
    """Instantiate ``cls`` from a mapping, rejecting unknown keys by dotted name."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in names:
            raise ConfigError(f"unknown key '{path}'")
        sub = _NESTED.get(cls, {}).get(key)
        if sub is not None:
            kwargs[key] = build(sub, value, path)
        elif cls is EngineConfig and key == "mounts":
            kwargs[key] = tuple(_mount(m, f"{path}[{i}]") for i, m in enumerate(value))
        else:
            kwargs[key] = tuple(value) if isinstance(value, list) else value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _mount(d: Dict[str, Any], where: str) -> SensorMount:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    d = dict(d)
    for deg, rad in _DEGREES.items():
        if deg in d:
            d[rad] = math.radians(d.pop(deg))
    return build(SensorMount, d, where)


def load_config(path) -> EngineConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return build(EngineConfig, data)


def config_to_dict(cfg) -> Dict[str, Any]:
    """Plain mapping of a config (angles in radians), suitable for YAML output."""
    out = dataclasses.asdict(cfg)

    def fix(v):
        if isinstance(v, dict):
            return {k: fix(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [fix(x) for x in v]
        return v

    return fix(out)
