"""Configuration dataclasses, strict JSON loading, and stable config hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError

MODALITIES: tuple[str, ...] = ("lidar", "radar", "camera", "imu", "gnss")
FEATURE_DIMS: dict[str, int] = {"lidar": 24, "radar": 8, "camera": 16, "imu": 6, "gnss": 3}
EGO_MODALITIES: frozenset[str] = frozenset({"imu", "gnss"})
WEATHERS: tuple[str, ...] = ("normal", "fog", "rain", "snow")


def _default_noise_mult() -> dict[str, dict[str, float]]:
    return {
        "normal": {"lidar": 1.0, "radar": 1.0, "camera": 1.0, "imu": 1.0, "gnss": 1.0},
        "fog": {"lidar": 1.5, "radar": 1.1, "camera": 3.0, "imu": 1.0, "gnss": 1.0},
        "rain": {"lidar": 2.5, "radar": 1.3, "camera": 2.5, "imu": 1.0, "gnss": 1.0},
        "snow": {"lidar": 2.0, "radar": 1.2, "camera": 2.0, "imu": 1.0, "gnss": 1.0},
    }


def _default_dropout_add() -> dict[str, dict[str, float]]:
    return {
        "normal": {},
        "fog": {"camera": 0.05},
        "rain": {"lidar": 0.10, "camera": 0.10},
        "snow": {"lidar": 0.05, "camera": 0.05},
    }


@dataclass
class WorldConfig:
    area: float = 40.0
    n_classes: int = 6
    min_objects: int = 1
    max_objects: int = 8
    n_candidates: int = 32
    dt: float = 0.5
    min_separation: float = 1.0
    max_attempts: int = 1000
    center_jitter: float = 0.5
    size_jitter: tuple[float, float] = (0.8, 1.2)
    yaw_jitter: float = 0.3
    assign_radius: float = 2.0
    base_noise: dict[str, float] = field(
        default_factory=lambda: {"lidar": 0.05, "radar": 0.08, "camera": 0.15, "imu": 0.05, "gnss": 0.05}
    )
    noise_mult: dict[str, dict[str, float]] = field(default_factory=_default_noise_mult)
    dropout_add: dict[str, dict[str, float]] = field(default_factory=_default_dropout_add)
    holdout: list[tuple[str, int]] = field(default_factory=lambda: [("camera", 5)])
    splits: dict[str, int] = field(default_factory=lambda: {"train": 500, "val": 100, "test": 100})


@dataclass
class ModelConfig:
    hidden: int = 1024
    embed_dim: int = 32
    adapter_bottleneck: int = 8
    lora_rank: int = 8
    lora_alpha: float | None = None  # None means 2 * rank
    head_hidden: int = 64
    init_seed: int = 0


@dataclass
class LossConfig:
    lambda_det: float = 1.0
    lambda_met: float = 0.5
    lambda_cons: float = 0.1
    margin: float = 0.3
    focal_gamma: float = 2.0
    cross_modal_consistency: bool = False
    metric_modalities: tuple[str, ...] = ("lidar", "radar", "camera")


@dataclass
class PretrainConfig:
    epochs: int = 3
    batch_pairs: int = 8
    lr: float = 1e-3


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_pairs: int = 4
    lr: float = 1e-3
    dropout_prob: dict[str, float] = field(default_factory=lambda: {m: 0.2 for m in MODALITIES})
    max_steps: int | None = None


@dataclass
class EvalConfig:
    thresholds: tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    tp_threshold: float = 1.0
    weather_threshold: float = 0.5
    dedup_radius: float = 1.0
    subsets: list[list[str]] = field(
        default_factory=lambda: [[m] for m in MODALITIES] + [list(MODALITIES), ["lidar", "camera"]]
    )


@dataclass
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def hash(self) -> str:
        return config_hash(self)

    def dataset_hash(self) -> str:
        """Digest of everything the generated data depends on."""
        return config_hash({"seed": self.seed, "world": self.world})


def to_jsonable(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(to_jsonable(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[key] = tuple(value)
        elif key == "holdout":
            kwargs[key] = [tuple(v) for v in value]
        else:
            kwargs[key] = value
    return cls(**kwargs)


def load_config(data: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a (possibly partial) dict, rejecting unknown fields."""
    cfg = _build(RunConfig, data or {}, "config")
    validate(cfg)
    return cfg


def load_config_file(path: str | Path | None) -> RunConfig:
    if path is None:
        return load_config({})
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return load_config(data)


def validate(cfg: RunConfig) -> None:
    w = cfg.world
    if w.area <= 0 or w.n_classes < 2 or w.n_candidates < 1:
        raise ConfigError("world: area, n_classes and n_candidates must be positive")
    if not 0 <= w.min_objects <= w.max_objects:
        raise ConfigError("world: need 0 <= min_objects <= max_objects")
    if w.max_objects > w.n_candidates:
        raise ConfigError("world: more objects than candidates")
    for m, c in w.holdout:
        if m not in MODALITIES or not 0 <= c < w.n_classes:
            raise ConfigError(f"world: invalid holdout pair ({m}, {c})")
    for weather in WEATHERS:
        if weather not in w.noise_mult:
            raise ConfigError(f"world: noise table lacks {weather}")
    lc = cfg.loss
    if min(lc.lambda_det, lc.lambda_met, lc.lambda_cons) < 0:
        raise ConfigError("loss: lambda weights must be non-negative")
    if lc.margin <= 0 or lc.focal_gamma < 0:
        raise ConfigError("loss: margin must be > 0 and gamma >= 0")
    if cfg.model.lora_rank < 1:
        raise ConfigError("model: lora_rank must be >= 1")
    t = cfg.train
    if t.epochs < 1 or t.batch_pairs < 1 or t.lr <= 0:
        raise ConfigError("train: epochs, batch_pairs and lr must be positive")
    if set(t.dropout_prob) - set(MODALITIES):
        raise ConfigError("train: dropout_prob has unknown modalities")
    if all(t.dropout_prob.get(m, 0.0) >= 1.0 for m in MODALITIES):
        raise ConfigError("train: every modality would always drop")
