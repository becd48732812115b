"""Run configuration: nested dataclasses with strict JSON loading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .boxes import ShiftConfig
from .errors import ConfigError, ContractError
from .hard_queries import AmmConfig, HqmConfig
from .losses import LossWeights
from .model import ModelConfig
from .scenes import SceneSpec


@dataclass(frozen=True)
class DataConfig:
    num_train: int = 512
    num_val: int = 128
    spec: SceneSpec = field(default_factory=SceneSpec)

    def __post_init__(self):
        if self.num_train < 1 or self.num_val < 1:
            raise ConfigError("dataset sizes must be positive")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    decay_factor: float = 0.1
    decay_at: float = 0.6      # fraction of epochs after which lr decays
    epochs: int = 40
    batch_size: int = 8

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not (0.0 < self.decay_at <= 1.0):
            raise ConfigError("decay_at must be a fraction of the epoch count")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    map_target: float = 0.5    # threshold for epochs-to-target reporting

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ConfigError("iou_threshold must be in (0, 1]")


@dataclass(frozen=True)
class AblationConfig:
    strategies: tuple[str, ...] = ("baseline", "gbs_only", "amm_only", "ajl")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    workers: int = 0           # 0 picks min(cpu count, job count)

    def __post_init__(self):
        if not self.strategies or not self.seeds:
            raise ConfigError("ablation needs strategies and seeds")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    hqm: HqmConfig = field(default_factory=HqmConfig)
    amm: AmmConfig = field(default_factory=AmmConfig)
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        spec = self.data.spec
        if spec.pairs_max > self.model.num_queries:
            raise ConfigError("pairs_max must not exceed the query count")
        if spec.num_classes != self.model.num_classes:
            raise ConfigError("scene and model class counts differ")
        if spec.num_verbs != self.model.num_verbs:
            raise ConfigError("scene and model verb counts differ")
        if self.amm.k > spec.grid_h * spec.grid_w:
            raise ConfigError("AMM top-K exceeds the grid cell count")

    def with_overrides(self, seed=None, strategy=None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if strategy is not None:
            cfg = replace(cfg, hqm=replace(cfg.hqm, strategy=strategy))
        return cfg


def _build(cls, value, path):
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object, got {type(value).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(value) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, raw in value.items():
        target = _DATACLASS_FIELDS.get((cls, name))
        if target is not None:
            kwargs[name] = _build(target, raw, f"{path}.{name}")
        elif isinstance(raw, list):
            kwargs[name] = tuple(raw)
        else:
            kwargs[name] = raw
    try:
        return cls(**kwargs)
    except (ContractError, TypeError) as e:
        raise ConfigError(f"{path}: {e}") from e


# nested dataclass fields resolved statically (string annotations make
# runtime introspection unreliable)
_DATACLASS_FIELDS = {
    (DataConfig, "spec"): SceneSpec,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "hqm"): HqmConfig,
    (RunConfig, "amm"): AmmConfig,
    (RunConfig, "shift"): ShiftConfig,
    (RunConfig, "loss"): LossWeights,
    (RunConfig, "optim"): OptimConfig,
    (RunConfig, "eval"): EvalConfig,
    (RunConfig, "ablation"): AblationConfig,
}


def config_from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "config")


def config_to_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(raw)


def tiny_config() -> RunConfig:
    """Desk-drawer config for gradient checks and fast tests."""
    return RunConfig(
        data=DataConfig(num_train=8, num_val=4,
                        spec=SceneSpec(num_classes=3, num_verbs=3, grid_h=6,
                                       grid_w=6, pairs_min=1, pairs_max=2,
                                       box_min=0.2, box_max=0.5)),
        model=ModelConfig(dim=8, heads=2, layers=2, num_queries=4,
                          num_classes=3, num_verbs=3, ffn_hidden=8),
        amm=AmmConfig(k=6, gamma=0.4),
        optim=OptimConfig(epochs=2, batch_size=2),
    )
