"""Engine configuration: dataclasses plus a strict TOML reader/writer."""
from __future__ import annotations

import dataclasses
import difflib
import math
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .errors import ConfigError


def _is_multiple(value: float, quantum: float) -> bool:
    ratio = value / quantum
    return abs(ratio - round(ratio)) < 1e-9 * max(1.0, abs(ratio))


@dataclass
class GridConfig:
    leaf_voxel_size: float = 0.1
    levels: int = 3
    feature_dim: int = 8
    local_map_side: float = 40.0

    def __post_init__(self):
        if not self.leaf_voxel_size > 0:
            raise ConfigError(f"leaf_voxel_size must be > 0, got {self.leaf_voxel_size}")
        if self.levels < 1:
            raise ConfigError(f"levels must be >= 1, got {self.levels}")
        if self.feature_dim < 1:
            raise ConfigError(f"feature_dim must be >= 1, got {self.feature_dim}")
        if not _is_multiple(self.local_map_side, self.coarsest_voxel_size) or self.local_map_side <= 0:
            raise ConfigError(
                f"local_map_side {self.local_map_side} is not a positive multiple of the "
                f"coarsest voxel size {self.coarsest_voxel_size}"
            )

    def voxel_size(self, level: int) -> float:
        """Voxel size of 0-based ``level`` (level 0 is the leaf level)."""
        return self.leaf_voxel_size * (1 << level)

    @property
    def coarsest_voxel_size(self) -> float:
        return self.voxel_size(self.levels - 1)

    def extent(self, level: int) -> int:
        return int(round(self.local_map_side / self.voxel_size(level)))

    @property
    def feature_width(self) -> int:
        return self.levels * self.feature_dim


@dataclass
class DecoderConfig:
    hidden_dim: int = 32

    def __post_init__(self):
        if self.hidden_dim < 1:
            raise ConfigError("hidden_dim must be >= 1")


@dataclass
class TrainerConfig:
    sigma: float = 0.05
    batch_points: int = 2048
    surface_samples: int = 3
    free_samples: int = 3
    outlier_eps: float = 0.05
    iterations_per_frame: int = 50
    historical_cap: int = 2**20
    outlier_period_frames: int = 10
    learning_rate: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    outside_fraction: float = 0.1
    freeze_after_frames: int = 30
    t_near: float = 0.0
    bundle_supervision: bool = True
    outlier_removal: bool = True
    observe_dilation: int = 1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be > 0")
        if not self.outlier_eps > 0:
            raise ConfigError("outlier_eps must be > 0")
        if self.surface_samples < 0 or self.free_samples < 0:
            raise ConfigError("surface_samples and free_samples must be >= 0")
        if self.batch_points < 1:
            raise ConfigError("batch_points must be >= 1")
        if not 0.0 <= self.outside_fraction < 1.0:
            raise ConfigError("outside_fraction must be in [0, 1)")
        if self.iterations_per_frame < 0 or self.historical_cap < 1:
            raise ConfigError("iterations_per_frame must be >= 0 and historical_cap >= 1")
        if self.t_near < 0 or self.observe_dilation < 0:
            raise ConfigError("t_near and observe_dilation must be >= 0")


@dataclass
class GlobalMapConfig:
    # None means 1.5 x local_map_side; "inf" disables distance freezing
    freeze_radius: float | None = None
    archive: str = "disk"

    def __post_init__(self):
        if self.archive not in ("disk", "memory"):
            raise ConfigError(f"archive must be 'disk' or 'memory', got {self.archive!r}")
        if self.freeze_radius is not None and not self.freeze_radius > 0:
            raise ConfigError("freeze_radius must be > 0")


@dataclass
class RunConfig:
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class MapperConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    global_map: GlobalMapConfig = field(default_factory=GlobalMapConfig)
    run: RunConfig = field(default_factory=RunConfig)

    @property
    def freeze_radius(self) -> float:
        r = self.global_map.freeze_radius
        return 1.5 * self.grid.local_map_side if r is None else r

    @classmethod
    def indoor(cls, **sections) -> "MapperConfig":
        """Defaults for room-scale depth-camera mapping (5 cm leaves, sigma 2 cm)."""
        cfg = cls(
            grid=GridConfig(leaf_voxel_size=0.05, local_map_side=12.0),
            trainer=TrainerConfig(sigma=0.02),
        )
        return dataclasses.replace(cfg, **sections)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "grid": GridConfig,
    "decoder": DecoderConfig,
    "trainer": TrainerConfig,
    "global_map": GlobalMapConfig,
    "run": RunConfig,
}


def _unknown(kind: str, name: str, valid) -> ConfigError:
    close = difflib.get_close_matches(name, list(valid), n=1)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    return ConfigError(f"unknown {kind} {name!r}{hint} (valid: {', '.join(sorted(valid))})")


def _coerce(cls, key: str, value):
    ftype = {f.name: f.type for f in dataclasses.fields(cls)}[key]
    if "bool" in ftype:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if ftype.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if "float" in ftype:
        if isinstance(value, str) and value.lower() in ("inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def config_from_dict(data: dict) -> MapperConfig:
    sections = {}
    for name, body in data.items():
        if name not in _SECTIONS:
            raise _unknown("section", name, _SECTIONS)
        if not isinstance(body, dict):
            raise ConfigError(f"section [{name}] must be a table")
        cls = _SECTIONS[name]
        valid = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in body.items():
            if key not in valid:
                raise _unknown(f"key in [{name}]", key, valid)
            kwargs[key] = _coerce(cls, key, value)
        sections[name] = cls(**kwargs)
    return MapperConfig(**sections)


def read_config(path) -> MapperConfig:
    """Read a sectioned TOML config; unknown keys are rejected."""
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return '"inf"'
        return repr(value)
    if isinstance(value, int):
        return str(value)
    return '"' + str(value).replace("\\", "\\\\").replace('"', '\\"') + '"'


def config_to_toml(cfg: MapperConfig) -> str:
    lines = []
    for name in _SECTIONS:
        lines.append(f"[{name}]")
        for key, value in getattr(cfg, name).__dict__.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_config(cfg: MapperConfig, path) -> None:
    Path(path).write_text(config_to_toml(cfg))
