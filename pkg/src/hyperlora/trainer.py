"""Multi-defense adversarial tuning loop and plain pretraining.

The tuning loop draws one defense method uniformly at random per minibatch,
crafts that method's adversarial batch against the currently adapted model,
evaluates the method's objective, and steps the trainable parameters: the
backbone's unfrozen subset plus the embedding bank and the hypernetwork
heads. The frozen base never changes, bit for bit.

Training emits newline-delimited JSON records {step, epoch, method, loss, lr}.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor

from .attacks import AttackBudget, pgd_attack
from .backbone import TRAIN_HEAD_AND_NORMS, VisionBackbone
from .data import LabeledImages, iter_batches
from .defenses import DefenseBank, DefenseSpec
from .errors import ConfigurationError, NumericalError
from .hypernet import LoraFactors, LoraHypernetwork, MethodRegistry


UPDATE_RULES = ("sgd", "adam")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule shared by pretraining and adversarial tuning.

    `update_rule` selects between momentum SGD and Adam over the same field
    set; under Adam the momentum value serves as the first moment decay.
    """

    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_milestones: tuple[int, ...] | None = None  # None: 70% and 90% of epochs
    lr_decay: float = 0.1
    seed: int = 0
    trainable_policy: str = TRAIN_HEAD_AND_NORMS
    update_rule: str = "sgd"
    log_every: int = 1

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("epochs must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr must be > 0 and lr_decay in (0, 1]")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be >= 0")
        if self.update_rule not in UPDATE_RULES:
            raise ConfigurationError(
                f"update_rule must be one of {UPDATE_RULES}, got {self.update_rule!r}"
            )
        ms = self.milestones
        if any(m < 0 or m >= max(self.epochs, 1) for m in ms):
            raise ConfigurationError(f"milestones {ms} outside [0, epochs)")
        if any(b >= a for a, b in zip(ms[1:], ms)):
            raise ConfigurationError(f"milestones {ms} must be strictly increasing")

    @property
    def milestones(self) -> tuple[int, ...]:
        if self.lr_milestones is not None:
            return tuple(self.lr_milestones)
        if self.epochs < 2:
            return ()
        first = int(round(0.7 * self.epochs))
        second = int(round(0.9 * self.epochs))
        return (first,) if second <= first or second >= self.epochs else (first, second)

    def lr_at(self, epoch: int) -> float:
        """Exact stepped schedule: base lr decayed once per passed milestone."""
        k = sum(1 for m in self.milestones if epoch >= m)
        return self.lr * self.lr_decay**k

    def build_optimizer(self, params) -> torch.optim.Optimizer:
        if self.update_rule == "adam":
            return torch.optim.Adam(
                params,
                lr=self.lr,
                betas=(self.momentum, 0.999),
                weight_decay=self.weight_decay,
            )
        return torch.optim.SGD(
            params,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )


def sample_method(rng: random.Random, registry: MethodRegistry) -> str:
    """Uniform draw over the registered methods."""
    if registry.count < 1:
        raise ConfigurationError("cannot sample from an empty registry")
    return registry.methods[rng.randrange(registry.count)]


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    loss_sums: dict[str, float] = field(default_factory=dict)
    loss_counts: dict[str, int] = field(default_factory=dict)

    def record(self, method: str, loss: float) -> None:
        self.loss_sums[method] = self.loss_sums.get(method, 0.0) + loss
        self.loss_counts[method] = self.loss_counts.get(method, 0) + 1

    def running_loss(self, method: str) -> float:
        c = self.loss_counts.get(method, 0)
        return self.loss_sums.get(method, 0.0) / c if c else float("nan")


class HyperAtTrainer:
    """Per-minibatch method-sampled adversarial tuning of hypernetwork adapters."""

    def __init__(
        self,
        model: VisionBackbone,
        hypernet: LoraHypernetwork,
        defenses: DefenseBank,
        registry: MethodRegistry,
        config: TrainConfig,
        log_path: str | Path | None = None,
    ):
        for m in registry.methods:
            defenses.get(m)  # fail fast on unregistered methods
        self.model = model
        self.hypernet = hypernet
        self.defenses = defenses
        self.registry = registry
        self.config = config
        self.state = TrainState()
        self.rng = random.Random(config.seed)
        self.records: list[dict] = []
        self.log_path = Path(log_path) if log_path is not None else None

        model.freeze_pretrained(config.trainable_policy)
        params = [p for p in model.parameters() if p.requires_grad]
        params += list(hypernet.parameters())
        self.optimizer = config.build_optimizer(params)
        self._lr = config.lr

    def _set_lr(self, lr: float) -> None:
        self._lr = lr
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    def _log(self, method: str, loss: float) -> None:
        rec = {
            "step": self.state.step,
            "epoch": self.state.epoch,
            "method": method,
            "loss": loss,
            "lr": self._lr,
        }
        self.records.append(rec)
        if self.log_path is not None:
            with self.log_path.open("a") as f:
                f.write(json.dumps(rec) + "\n")

    def train_step(self, x: Tensor, y: Tensor, method: str) -> float:
        """One attack + objective + optimizer update for a sampled method."""
        if x.shape[0] == 0:
            raise ConfigurationError("empty batch")
        spec: DefenseSpec = self.defenses.get(method)

        # The attack sees the adapted model with constant deltas; gradients
        # flow only into the pixels here.
        frozen_deltas = {
            s: d.detach() for s, d in self.hypernet.deltas_for_method(method).items()
        }
        adv = pgd_attack(
            lambda inp: self.model(inp, frozen_deltas),
            x,
            y,
            spec.budget,
            loss_kind=spec.inner_loss_kind,
            seed=self.config.seed * 1_000_003 + self.state.step,
        )

        deltas = self.hypernet.deltas_for_method(method)
        loss = spec.loss(lambda inp: self.model(inp, deltas), x, adv.x_adv, y)
        if not torch.isfinite(loss):
            raise NumericalError(
                f"non-finite loss for method {method!r} at step {self.state.step}"
            )
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

        value = float(loss.detach())
        self.state.record(method, value)
        self._log(method, value)
        self.state.step += 1
        return value

    def run(self, data: LabeledImages) -> dict[str, dict]:
        """Full tuning run; returns per-method detached factor collections."""
        cfg = self.config
        for epoch in range(cfg.epochs):
            self.state.epoch = epoch
            self._set_lr(cfg.lr_at(epoch))
            for x, y in iter_batches(data, cfg.batch_size, seed=cfg.seed + epoch):
                method = sample_method(self.rng, self.registry)
                self.train_step(x, y, method)
        return self.specialists()

    def specialists(self) -> dict[str, dict]:
        """Detached per-method factor maps, keyed method -> site -> factors."""
        out: dict[str, dict] = {}
        for method in self.registry.methods:
            factors = self.hypernet.factors_for_method(method)
            out[method] = {
                site: LoraFactors(f.a.detach().clone(), f.b.detach().clone(), f.scale)
                for site, f in factors.items()
            }
        return out


def train_hyperat(
    model: VisionBackbone,
    hypernet: LoraHypernetwork,
    defenses: DefenseBank,
    registry: MethodRegistry,
    config: TrainConfig,
    data: LabeledImages,
    log_path: str | Path | None = None,
) -> tuple[dict[str, dict], HyperAtTrainer]:
    trainer = HyperAtTrainer(model, hypernet, defenses, registry, config, log_path)
    specialists = trainer.run(data)
    return specialists, trainer


def train_clean(
    model: VisionBackbone,
    data: LabeledImages,
    config: TrainConfig,
    log_path: str | Path | None = None,
) -> list[dict]:
    """Standard cross-entropy training of the whole backbone (pretraining)."""
    model.unfreeze_all()
    optimizer = config.build_optimizer(model.parameters())
    records: list[dict] = []
    path = Path(log_path) if log_path is not None else None
    step = 0
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        for x, y in iter_batches(data, config.batch_size, seed=config.seed + epoch):
            logits = model(x)
            loss = torch.nn.functional.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite pretraining loss at step {step}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            rec = {
                "step": step,
                "epoch": epoch,
                "method": "clean",
                "loss": float(loss.detach()),
                "lr": lr,
            }
            records.append(rec)
            if path is not None:
                with path.open("a") as f:
                    f.write(json.dumps(rec) + "\n")
            step += 1
    return records


def adversarial_finetune_single(
    model: VisionBackbone,
    hypernet: LoraHypernetwork,
    defense: DefenseSpec,
    config: TrainConfig,
    data: LabeledImages,
) -> dict:
    """Single-method tuning, the M=1 degenerate case of the sampled loop."""
    registry = MethodRegistry((defense.method,))
    bank = DefenseBank({defense.method: defense})
    trainer = HyperAtTrainer(model, hypernet, bank, registry, config)
    return trainer.run(data)[defense.method]
