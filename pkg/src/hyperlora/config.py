"""Experiment configuration: one serializable document drives every stage.

Configs are nested frozen dataclasses that round-trip through JSON to an
equal value; a canonical hash of the document ties checkpoints to the
config that produced them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from .attacks import AttackBudget
from .backbone import BackboneSpec
from .data import FORMATS, SYNTHETIC
from .errors import ConfigurationError
from .hypernet import DEFAULT_METHODS
from .trainer import TrainConfig


@dataclass(frozen=True)
class DatasetConfig:
    data_format: str = SYNTHETIC
    path: str | None = None
    image_size: int = 28
    channels: int = 1
    num_classes: int = 10
    train_size: int = 10000
    test_size: int = 2000
    eval_subset: int = 2000
    noise: float = 0.15

    def __post_init__(self) -> None:
        if self.data_format not in FORMATS:
            raise ConfigurationError(
                f"unknown dataset format {self.data_format!r}; known: {FORMATS}"
            )
        if self.train_size < 1 or self.test_size < 1 or self.eval_subset < 1:
            raise ConfigurationError("split sizes must be >= 1")
        if self.noise < 0:
            raise ConfigurationError("noise must be >= 0")


@dataclass(frozen=True)
class DefenseConfig:
    beta: float = 6.0
    lambda_weight: float = 5.0
    w_mse: float = 1.0
    w_ce: float = 1.0


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 16
    alpha: float | None = None  # None: equal to rank, so scale 1
    embed_dim: int = 32
    context_dim: int = 64

    def __post_init__(self) -> None:
        if self.rank < 1 or self.embed_dim < 1 or self.context_dim < 1:
            raise ConfigurationError("rank and embedding dims must be >= 1")


@dataclass(frozen=True)
class MergeConfig:
    iterations: int = 7
    lr: float = 1e-2
    tradeoff_kl: float = 1.0
    batch_size: int = 128

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.batch_size < 1 or self.lr < 0:
            raise ConfigurationError("bad merge settings")


@dataclass(frozen=True)
class ExperimentConfig:
    backbone: BackboneSpec = field(
        default_factory=lambda: BackboneSpec(
            image_size=28, patch_size=4, channels=1, embed_dim=64, depth=4, heads=4
        )
    )
    methods: tuple[str, ...] = DEFAULT_METHODS
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    # The transformer trains from scratch on CPU budgets, so both stages
    # default to the adaptive rule; the hypernetwork's factor pathway in
    # particular needs a small, per-parameter-scaled step to stay stable.
    train: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=10, lr=3e-4, update_rule="adam")
    )
    pretrain: TrainConfig = field(
        default_factory=lambda: TrainConfig(epochs=5, lr=1e-3, update_rule="adam")
    )
    attack: AttackBudget = field(
        default_factory=lambda: AttackBudget(0.1, 0.02, iterations=10)
    )
    merge: MergeConfig = field(default_factory=MergeConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self) -> None:
        self.backbone.validate()
        if not self.methods:
            raise ConfigurationError("at least one method is required")

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(doc: dict) -> "ExperimentConfig":
        try:
            return ExperimentConfig(
                backbone=BackboneSpec(**doc["backbone"]),
                methods=tuple(doc["methods"]),
                defense=DefenseConfig(**doc["defense"]),
                adapter=AdapterConfig(**doc["adapter"]),
                train=_train_from_dict(doc["train"]),
                pretrain=_train_from_dict(doc["pretrain"]),
                attack=AttackBudget(**doc["attack"]),
                merge=MergeConfig(**doc["merge"]),
                dataset=DatasetConfig(**doc["dataset"]),
                output_dir=doc["output_dir"],
                seed=int(doc["seed"]),
            )
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"malformed config document: {e}") from e

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def load(path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from e
        return ExperimentConfig.from_dict(doc)


def _train_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    ms = doc.get("lr_milestones")
    if ms is not None:
        doc["lr_milestones"] = tuple(ms)
    return TrainConfig(**doc)


def config_hash(config: ExperimentConfig) -> str:
    """Canonical content hash of the config document."""
    canonical = json.dumps(config.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def desk_config(**overrides: Any) -> ExperimentConfig:
    """CPU-tractable defaults: synthetic 28x28 grayscale, small backbone."""
    cfg = ExperimentConfig()
    return replace(cfg, **overrides) if overrides else cfg
