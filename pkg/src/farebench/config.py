"""Declarative pipeline configuration: JSON file plus dotted-key overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Sequence

from .dataset import SCHEMA
from .errors import ConfigError
from .synth import SAMPLE_PATH

FEATURES = (
    "pickup_longitude", "pickup_latitude", "dropoff_longitude", "dropoff_latitude",
    "passenger_count", "hour_of_day", "day_of_week", "month", "haversine_km",
)
TARGET = "fare_amount"
MODELS = ("gbdt", "gat", "tslite")
DEFAULT_NOISE_COLUMNS = (
    "fare_amount", "passenger_count",
    "pickup_longitude", "pickup_latitude", "dropoff_longitude", "dropoff_latitude",
)


@dataclass
class ImputeSection:
    k: int = 5
    donor_cap: int = 10_000


@dataclass
class FilterSection:
    multiplier: float = 1.5
    columns: list = field(default_factory=lambda: ["fare_amount"])
    lat_min: float = 40.5
    lat_max: float = 41.0
    lon_min: float = -74.3
    lon_max: float = -73.7
    min_fare: float = 0.01


@dataclass
class NoiseEntry:
    column: str
    level: float = 0.1


@dataclass
class DenoiserSection:
    encoder_dims: list = field(default_factory=lambda: [32, 16])
    max_epochs: int = 60
    batch_size: int = 128
    patience: int = 10
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5


@dataclass
class GbdtSection:
    enabled: bool = True
    depths: list = field(default_factory=lambda: [4, 6, 8])
    lambdas: list = field(default_factory=lambda: [0.1, 1.0, 10.0])
    eta: float = 0.1
    gamma: float = 0.0
    n_rounds: int = 500
    early_stop_rounds: int = 20
    n_bins: int = 256
    valid_fraction: float = 0.1


@dataclass
class GatSection:
    enabled: bool = True
    k: int = 8
    time_window: float = 900.0
    fanout: int = 8
    hidden: int = 16
    attention_dropout: float = 0.3
    ensemble_size: int = 3
    max_epochs: int = 20
    batch_size: int = 256
    patience: int = 7
    learning_rate: float = 5e-3
    weight_decay: float = 1e-5
    valid_fraction: float = 0.1


@dataclass
class TsliteSection:
    enabled: bool = True
    window_len: int = 10
    d_model: int = 16
    n_blocks: int = 2
    dropout: float = 0.3
    max_epochs: int = 30
    batch_size: int = 256
    patience: int = 7
    learning_rate: float = 5e-4
    weight_decay: float = 1e-5
    valid_fraction: float = 0.1


@dataclass
class ModelsSection:
    gbdt: GbdtSection = field(default_factory=GbdtSection)
    gat: GatSection = field(default_factory=GatSection)
    tslite: TsliteSection = field(default_factory=TsliteSection)


@dataclass
class EvalSection:
    n_bins: int = 10
    tolerance: float = 0.10
    min_abs_fare: float = 0.01


@dataclass
class PipelineConfig:
    input_path: str = str(SAMPLE_PATH)
    output_dir: str = "farebench_out"
    seed: int = 2015
    chunk_rows: int = 100_000
    impute: ImputeSection = field(default_factory=ImputeSection)
    filter: FilterSection = field(default_factory=FilterSection)
    noise: list = field(default_factory=lambda: [NoiseEntry(c, 0.1) for c in DEFAULT_NOISE_COLUMNS])
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    denoise_target: bool = False
    gat_edge_mode: str = "temporal_spatial"
    models: ModelsSection = field(default_factory=ModelsSection)
    eval: EvalSection = field(default_factory=EvalSection)
    workers: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def enabled_models(self) -> list[str]:
        return [m for m in MODELS if getattr(self.models, m).enabled]

    def noise_columns(self) -> list[str]:
        return [n.column for n in self.noise]


def _coerce(value: Any, default: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return list(value)
    return value


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    obj = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    for f in fields(cls):
        if f.name not in data:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        default = getattr(obj, f.name)
        value = data[f.name]
        if f.name == "noise" and cls is PipelineConfig:
            setattr(obj, f.name, _build_noise(value, sub))
        elif is_dataclass(default):
            setattr(obj, f.name, _build(type(default), value, sub))
        else:
            setattr(obj, f.name, _coerce(value, default, sub))
    return obj


def _build_noise(value: Any, path: str) -> list[NoiseEntry]:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list of {{column, level}} objects")
    out = []
    for i, item in enumerate(value):
        if not isinstance(item, dict) or "column" not in item:
            raise ConfigError(f"{path}[{i}]: each entry needs a 'column'")
        extra = sorted(set(item) - {"column", "level"})
        if extra:
            raise ConfigError(f"{path}[{i}]: unknown keys {extra}")
        out.append(NoiseEntry(str(item["column"]), _coerce(item.get("level", 0.1), 0.1, f"{path}[{i}].level")))
    return out


def validate(cfg: PipelineConfig) -> PipelineConfig:
    numeric = set(SCHEMA) - {"pickup_datetime"}
    for n in cfg.noise:
        if n.column not in numeric:
            raise ConfigError(f"noise column {n.column!r} is not a numeric schema column")
        if n.level < 0:
            raise ConfigError(f"noise level for {n.column} must be >= 0")
    if len(set(cfg.noise_columns())) != len(cfg.noise):
        raise ConfigError("noise columns must be unique")
    for c in cfg.filter.columns:
        if c not in numeric:
            raise ConfigError(f"filter column {c!r} is not a numeric schema column")
    if cfg.gat_edge_mode not in ("temporal_spatial", "fare_similarity"):
        raise ConfigError(f"gat_edge_mode must be temporal_spatial or fare_similarity, got {cfg.gat_edge_mode!r}")
    if cfg.impute.k < 1 or cfg.impute.donor_cap < cfg.impute.k:
        raise ConfigError("impute: need k >= 1 and donor_cap >= k")
    if cfg.filter.multiplier <= 0:
        raise ConfigError("filter.multiplier must be positive")
    if cfg.chunk_rows < 1:
        raise ConfigError("chunk_rows must be positive")
    if cfg.eval.n_bins < 1 or not 0 < cfg.eval.tolerance:
        raise ConfigError("eval: n_bins must be >= 1 and tolerance positive")
    if cfg.models.gat.ensemble_size < 2:
        raise ConfigError("models.gat.ensemble_size must be >= 2")
    for name in MODELS:
        sec = getattr(cfg.models, name)
        if not 0 < sec.valid_fraction < 1:
            raise ConfigError(f"models.{name}.valid_fraction must lie in (0, 1)")
    if not cfg.enabled_models():
        raise ConfigError("at least one model must be enabled")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    data = copy.deepcopy(data)
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for i, k in enumerate(keys[:-1]):
            if not isinstance(node, dict) or k not in node:
                raise ConfigError(f"override {text!r}: unknown key {'.'.join(keys[: i + 1])!r}")
            node = node[k]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"override {text!r}: unknown key {'.'.join(keys)!r}")
        node[keys[-1]] = value
    return data


def load_config(path: str | Path | None = None, overrides: Sequence[str] = ()) -> PipelineConfig:
    """Defaults, then the JSON file, then ``key=value`` overrides."""
    data = PipelineConfig().to_dict()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        data = _merge(data, user, "")
    data = apply_overrides(data, overrides)
    return validate(_build(PipelineConfig, data, ""))


def load_config_dict(data: dict) -> PipelineConfig:
    """Build from an already merged dict, e.g. ``PipelineConfig.to_dict()``."""
    return validate(_build(PipelineConfig, data, ""))


def _merge(base: dict, user: dict, path: str) -> dict:
    out = dict(base)
    for k, v in user.items():
        sub = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError(f"{path or 'config'}: unknown key {k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, sub)
        else:
            out[k] = v
    return out


def derive_seed(global_seed: int, component: str) -> int:
    """Per-component seed from hash(global seed, component name)."""
    digest = hashlib.sha256(f"{global_seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def stable_hash(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]
