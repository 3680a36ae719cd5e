"""Run configuration: defaults, JSON files, environment overrides and validation."""

from __future__ import annotations

import dataclasses
import json
import math
import os
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .geometry import load_track
from .latency import LatencySchedule
from .policies import DEFAULT_DELTA_GRID, TrainConfig

ENV_PREFIX = "PLMNET_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # tracks and simulation
    track: str = "test_track"
    train_track: str = "train_track"
    dt: float = 0.05
    speed: float = 16.7
    duration: float | None = None  # evaluation length in s; None means one lap
    seed: int = 0
    out: str = "runs/default"
    # data collection
    episodes: int = 100
    episode_duration: float = 15.0
    jitter_offset: float = 1.0
    jitter_heading: float = 0.05
    jitter_speed: float = 1.0
    action_noise: float = 0.02
    noise_hold: float = 0.5
    # balancing and training
    bins: int = 21
    cap_ratio: float = 10.0
    val_fraction: float = 0.1
    batch: int = 32
    lr: float = 0.001
    bm_epochs: int = 30
    tapm_epochs: int = 20
    flip_prob: float = 0.5
    refit_output: bool = True
    delta_grid: tuple[float, ...] = DEFAULT_DELTA_GRID
    # evaluation
    schedules: tuple[str, ...] = ("const:0.15", "const:0.2", "const:0.25", "const:0.3", "tv:0.0:0.35")
    tv_hold: float = 1.0
    resample_points: int = 500
    pcm_offsets: int = 200
    dtsi_window: float = 3.0
    centerline_ds: float = 1.0

    def __post_init__(self):
        validate(self)

    def train_config(self, epochs: int) -> TrainConfig:
        return TrainConfig(batch=self.batch, lr=self.lr, epochs=epochs, seed=self.seed,
                           flip_prob=self.flip_prob, refit_output=self.refit_output)

    def latency_schedules(self) -> list[LatencySchedule]:
        return [parse_schedule(s, self.tv_hold, self.seed) for s in self.schedules]

    def to_dict(self) -> dict:
        return {f.name: _jsonable(getattr(self, f.name)) for f in fields(self)}

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def parse_schedule(text: str, hold: float = 1.0, seed: int = 0) -> LatencySchedule:
    """``none`` | ``const:<delta>`` | ``tv:<lo>:<hi>`` (uniform per ``hold`` window)."""
    parts = text.strip().split(":")
    try:
        if parts[0] == "none" and len(parts) == 1:
            return LatencySchedule.zero()
        if parts[0] == "const" and len(parts) == 2:
            return LatencySchedule.constant(float(parts[1]))
        if parts[0] == "tv" and len(parts) == 3:
            return LatencySchedule.piecewise_random(float(parts[1]), float(parts[2]), hold, seed)
    except ValueError as exc:
        raise ConfigError(f"bad schedule {text!r}: {exc}") from None
    raise ConfigError(f"bad schedule {text!r}; expected none, const:<d> or tv:<lo>:<hi>")


def _multiple_of(x: float, dt: float) -> bool:
    return abs(x / dt - round(x / dt)) < 1e-9


def validate(cfg: RunConfig) -> None:
    if cfg.dt <= 0 or cfg.speed <= 0:
        raise ConfigError("dt and speed must be positive")
    if cfg.duration is not None and (cfg.duration <= 0 or not _multiple_of(cfg.duration, cfg.dt)):
        raise ConfigError("duration must be a positive multiple of dt")
    if not _multiple_of(cfg.episode_duration, cfg.dt):
        raise ConfigError("episode_duration must be a multiple of dt")
    grid = cfg.delta_grid
    if not grid or any(d <= 0 for d in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError("delta_grid must be positive and strictly increasing")
    if not all(_multiple_of(d, cfg.dt) for d in grid):
        raise ConfigError("every delta_grid entry must be a multiple of dt")
    for name in ("episodes", "bins", "batch", "resample_points", "pcm_offsets"):
        if getattr(cfg, name) < 1:
            raise ConfigError(f"{name} must be >= 1")
    if cfg.bm_epochs < 1 or cfg.tapm_epochs < 1:
        raise ConfigError("epochs must be >= 1")
    if not 0 < cfg.val_fraction < 1:
        raise ConfigError("val_fraction must be in (0, 1)")
    if cfg.lr <= 0 or cfg.cap_ratio <= 0:
        raise ConfigError("lr and cap_ratio must be positive")
    for s in cfg.schedules:
        parse_schedule(s, cfg.tv_hold, cfg.seed)


def _field_types() -> dict:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def _coerce(name: str, value, hint):
    """Convert JSON or string values to the declared field type."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(name, value, inner)
    if origin is tuple:
        item = args[0]
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        return tuple(_coerce(name, v, item) for v in value)
    try:
        if hint is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if hint is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if hint is float:
            v = float(value)
            if not math.isfinite(v):
                raise ValueError(value)
            return v
        return str(value).strip() if isinstance(value, str) else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None


def apply_overrides(cfg: RunConfig, values: dict, source: str) -> RunConfig:
    types = _field_types()
    changes = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} in {source}")
        changes[key] = _coerce(key, raw, types[key])
    try:
        return cfg.replace(**changes)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    names = {f.name for f in fields(RunConfig)}
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name not in names:
                raise ConfigError(f"unknown environment override {key}")
            out[name] = value
    return out


def load_config(path: str | Path | None = None, environ=None, cli: dict | None = None) -> RunConfig:
    """Defaults, then the JSON file, then ``PLMNET_*`` variables, then CLI flags."""
    cfg = RunConfig()
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        cfg = apply_overrides(cfg, data, str(path))
    cfg = apply_overrides(cfg, env_overrides(environ), "environment")
    if cli:
        cfg = apply_overrides(cfg, cli, "command line")
    for name in (cfg.track, cfg.train_track):
        try:
            load_track(name)
        except Exception as exc:  # noqa: BLE001 - any track problem is a config problem
            raise ConfigError(f"track {name!r}: {exc}") from None
    return cfg
