"""Declarative run configuration (YAML or JSON) for the pose and behavior commands.

Every section is a dataclass; unknown or mistyped keys raise
:class:`ConfigError` carrying the dotted key name. Relative paths resolve
against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError


@dataclass
class CorruptionSection:
    p_swap: float = 0.0
    box_jitter: float = 0.0
    p_drop: float = 0.0
    p_swap_global: float = 0.0


@dataclass
class LiveSection:
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "VLMLABEL_API_KEY"
    timeout: float = 120.0
    temperature: float = 0.0
    max_tokens: int = 2048
    transport_retries: int = 2
    max_concurrency: int = 4
    rate_per_second: float = 2.0
    burst: int = 4
    cassette: str | None = None
    cassette_mode: str = "off"


@dataclass
class ClientSection:
    kind: str = "oracle"  # oracle | live | unavailable
    seed: int = 0
    truth: str | None = None
    planted: str | None = None
    corruption: CorruptionSection = field(default_factory=CorruptionSection)
    live: LiveSection = field(default_factory=LiveSection)


@dataclass
class PoseInputs:
    centroids: str = "centroids.csv"
    bboxes: str = "bboxes.csv"
    seeds: str = "seeds.csv"
    images: str | None = None


@dataclass
class ThresholdSection:
    tau_reproj: float = 5.0
    tau_qc: float = 10.0
    radius: float = 40.0
    max_step_mm: float | None = None


@dataclass
class RansacSection:
    max_subset_size: int = 2
    iterations: int = 200
    seed: int = 0
    exhaustive: bool | None = None


@dataclass
class PipelineSection:
    max_retries: int = 2
    workers: int = 4
    strict_window: bool = False
    region_margin: float = 12.0
    max_passes: int = 2
    max_frames: int | None = None
    max_consecutive_unavailable: int = 5


@dataclass
class PoseRunConfig:
    calibration: str = "calibration.yaml"
    output: str = "run"
    ablation: str = "full"
    inputs: PoseInputs = field(default_factory=PoseInputs)
    thresholds: ThresholdSection = field(default_factory=ThresholdSection)
    ransac: RansacSection = field(default_factory=RansacSection)
    pipeline: PipelineSection = field(default_factory=PipelineSection)
    client: ClientSection = field(default_factory=ClientSection)

    PATHS = ("calibration", "output", "inputs.centroids", "inputs.bboxes", "inputs.seeds", "inputs.images",
             "client.truth", "client.planted", "client.live.cassette")


@dataclass
class DecSection:
    k: int = 10
    epochs: int = 100
    seed: int = 0
    alpha: float = 1.0
    learning_rate: float = 1.0
    min_duration: float = 0.5


@dataclass
class CaptionSection:
    fps: float = 10.0
    video: str = "video://{animal}/{frame:06d}"
    workers: int = 4
    max_retries: int = 2


@dataclass
class MergeSection:
    epoch_seconds: float = 60.0
    max_retries: int = 2


@dataclass
class BehaviorRunConfig:
    features: str = "features.npz"
    output: str = "behavior"
    dec: DecSection = field(default_factory=DecSection)
    caption: CaptionSection = field(default_factory=CaptionSection)
    merge: MergeSection = field(default_factory=MergeSection)
    client: ClientSection = field(default_factory=ClientSection)

    PATHS = ("features", "output", "client.truth", "client.planted", "client.live.cassette")


def _check_scalar(value: Any, hint: Any, key: str) -> Any:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(hint)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _check_scalar(value, inner[0], key)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}", key=key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}", key=key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}", key=key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}", key=key)
        return value
    return value


def build(cls: type, data: Mapping[str, Any] | None, prefix: str = "") -> Any:
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys by name."""
    data = {} if data is None else data
    if not isinstance(data, Mapping):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping", key=prefix.rstrip(".") or None)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown config key {prefix + str(key)!r}", key=prefix + str(key))
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = build(hint, value, f"{prefix}{name}.")
        else:
            kwargs[name] = _check_scalar(value, hint, prefix + name)
    return cls(**kwargs)


def _get(obj: Any, dotted: str) -> Any:
    for part in dotted.split("."):
        obj = getattr(obj, part)
    return obj


def _set(obj: Any, dotted: str, value: Any) -> None:
    *parents, last = dotted.split(".")
    for part in parents:
        obj = getattr(obj, part)
    setattr(obj, last, value)


def apply_overrides(config: Any, overrides: Mapping[str, Any]) -> Any:
    """Set dotted keys (e.g. ``pipeline.max_frames``); ``None`` values are skipped."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        try:
            current = _get(config, dotted)
        except AttributeError:
            raise ConfigError(f"unknown config key {dotted!r}", key=dotted) from None
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{dotted} is a section, not a value", key=dotted)
        _set(config, dotted, value)
    return config


def read_document(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", key="config") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}", key="config") from exc
    return doc or {}


def load_config(cls: type, path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> Any:
    """Read, validate, override and resolve paths of a run config."""
    base = Path(path).resolve().parent if path is not None else Path.cwd()
    config = build(cls, read_document(path) if path is not None else {})
    apply_overrides(config, overrides or {})
    for dotted in cls.PATHS:
        value = _get(config, dotted)
        if value is not None and not Path(value).is_absolute():
            _set(config, dotted, str(base / value))
    return config


def effective(config: Any) -> dict[str, Any]:
    return dataclasses.asdict(config)
