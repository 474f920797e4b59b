"""Run configuration: nested dataclasses <-> YAML, with dotted-key overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import types
import typing
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import yaml

from .errors import ConfigError, InvalidInputError
from .field import FieldConfig
from .nn import HashGridConfig
from .planner import PlannerSettings
from .primitives import LocalConfig, RobotGeometry, SensorModel


@dataclass
class SceneConfig:
    # "bundled:<name>" or a path to an OBJ/PLY file
    path: str = "bundled:room"
    format: str | None = None
    # world box; None derives it from the scene (bundled bounds, or vertex bbox +/- margin)
    box_min: tuple | None = None
    box_max: tuple | None = None
    margin: float = 0.2
    # rescale the mesh uniformly into [box_min, box_max] (minus margin); lengths are reported back in mesh units
    normalize: bool = False


@dataclass
class SamplingConfig:
    n_near: int = 16000
    n_far: int = 4000
    near_band: float = 0.2
    holdout: float = 0.1


@dataclass
class SensorConfig:
    hfov: float = math.pi / 2
    vfov: float = math.pi / 2
    range: float = 1.5
    width: int = 16
    height: int = 16

    def build(self) -> SensorModel:
        return SensorModel(self.hfov, self.vfov, self.range, self.width, self.height)


@dataclass
class RobotConfigSection:
    side: float = 0.1
    n_points: int = 128

    def build(self) -> RobotGeometry:
        return RobotGeometry.drone(self.side, self.n_points)


def _default_field() -> FieldConfig:
    return FieldConfig(box_min=None, box_max=None, epochs=30)


def _default_planner() -> PlannerSettings:
    return PlannerSettings(root=(1.5, 1.5, 1.0))


@dataclass
class RunConfig:
    scene: SceneConfig = dc_field(default_factory=SceneConfig)
    sampling: SamplingConfig = dc_field(default_factory=SamplingConfig)
    field: FieldConfig = dc_field(default_factory=_default_field)
    local: LocalConfig = dc_field(default_factory=LocalConfig)
    sensor: SensorConfig = dc_field(default_factory=SensorConfig)
    robot: RobotConfigSection = dc_field(default_factory=RobotConfigSection)
    planner: PlannerSettings = dc_field(default_factory=_default_planner)
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        # the planner reads local-head settings from its own field
        self.planner.local = self.local

    def validate(self) -> "RunConfig":
        f, s = self.field, self.sampling
        checks = [
            (f.tr > 0, "field.tr must be positive"),
            (f.cell_size > 0, "field.cell_size must be positive"),
            (f.epochs >= 1 and f.batch_size >= 1, "field.epochs and field.batch_size must be >= 1"),
            (f.lr > 0, "field.lr must be positive"),
            (all(h >= 1 for h in f.hidden), "field.hidden widths must be >= 1"),
            (f.oneblob_bins >= 1, "field.oneblob_bins must be >= 1"),
            (s.n_near >= 0 and s.n_far >= 0 and s.n_near + s.n_far > 0, "sampling needs at least one sample"),
            (0 <= s.holdout < 1, "sampling.holdout must lie in [0, 1)"),
            (self.local.max_iter >= 1 and self.local.lr > 0, "local.max_iter >= 1 and local.lr > 0 required"),
            (self.local.n_vis >= 1 and self.local.n_occ >= 1, "local.n_vis and local.n_occ must be >= 1"),
            (self.local.ray_budget >= 1, "local.ray_budget must be >= 1"),
            (self.robot.side > 0 and self.robot.n_points >= 4, "robot.side > 0 and robot.n_points >= 4 required"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.sensor.build()
            HashGridConfig(**dataclasses.asdict(f.hashgrid))
            PlannerSettings(**{k.name: getattr(self.planner, k.name) for k in dataclasses.fields(PlannerSettings)})
        except InvalidInputError as exc:
            raise ConfigError(str(exc)) from None
        if self.planner.xi is not None and not 0 < self.planner.xi < f.tr:
            raise ConfigError("planner.xi must lie in (0, field.tr)")
        return self

    # -- serialisation ------------------------------------------------------------
    def to_dict(self) -> dict:
        d = to_plain(self)
        d["planner"].pop("local")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        planner = dict(d.get("planner") or {})
        if "local" in planner:
            raise ConfigError("planner.local is not a key; use the top-level 'local' section")
        cfg = from_plain(cls, d)
        return cfg

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=None)

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from None
        if data is not None and not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config not found: {path}")
        return cls.from_yaml(path.read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    def with_overrides(self, assignments) -> "RunConfig":
        """Apply ``key.sub=value`` strings; values are parsed as YAML scalars/lists."""
        d = self.to_dict()
        for item in assignments or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            parts = key.strip().split(".")
            node = d
            for p in parts[:-1]:
                if not isinstance(node, dict) or p not in node:
                    raise ConfigError(f"unknown config key {key!r}")
                node = node[p]
            if not isinstance(node, dict) or parts[-1] not in node:
                raise ConfigError(f"unknown config key {key!r}")
            try:
                node[parts[-1]] = yaml.safe_load(raw)
            except yaml.YAMLError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        return RunConfig.from_dict(d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


def to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_plain(v) for v in obj]
    return obj


def _coerce(value, hint, key):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{key}: expected a mapping")
        return from_plain(hint, value, key + ".")
    if hint is tuple or origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list")
        return tuple(_number(v, key) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise ConfigError(f"{key}: expected an integer")
        try:
            f = float(value)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer") from None
        if not f.is_integer():
            raise ConfigError(f"{key}: expected an integer")
        return int(f)
    if hint is float:
        if isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number")
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number") from None
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string")
        return value
    return value


def _number(v, key):
    if isinstance(v, bool) or not isinstance(v, (int, float, str)):
        raise ConfigError(f"{key}: expected numbers")
    try:
        f = float(v)
    except ValueError:
        raise ConfigError(f"{key}: expected numbers") from None
    return int(f) if isinstance(v, int) else f


def from_plain(cls, data: dict, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in sorted(unknown))}")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except InvalidInputError as exc:
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: {exc}") from None
