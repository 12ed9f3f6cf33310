"""Training loop behavior: schedules, sampling, determinism, conservation."""

from __future__ import annotations

import json
import math
import random
from types import SimpleNamespace

import pytest
import torch

from hyperlora.attacks import AttackBudget
from hyperlora.backbone import VisionBackbone
from hyperlora.data import make_synthetic_splits
from hyperlora.defenses import DefenseSpec, default_defenses
from hyperlora.errors import ConfigurationError, NumericalError
from hyperlora.hypernet import MethodRegistry, build_hypernetwork
from hyperlora.trainer import (
    HyperAtTrainer,
    TrainConfig,
    TrainState,
    adversarial_finetune_single,
    sample_method,
    train_clean,
)

# Two-iteration inner attack keeps the loop tests cheap but still exercises
# the full attack-objective-update path.
BUDGET = AttackBudget(0.1, 0.05, iterations=2)

METHODS = ("vanilla_at", "trades", "mart", "dkl")


def fresh_pair(small_spec, registry, seed=0):
    model = VisionBackbone(small_spec, seed=seed)
    hypernet = build_hypernetwork(model, registry, rank=4, seed=seed)
    return model, hypernet


def make_trainer(model, hypernet, registry, **overrides):
    defaults = dict(epochs=1, batch_size=8, lr=1e-3, update_rule="adam", seed=0)
    defaults.update(overrides)
    cfg = TrainConfig(**defaults)
    bank = default_defenses(BUDGET, methods=tuple(registry.methods))
    return HyperAtTrainer(model, hypernet, bank, registry, cfg)


def assert_factor_maps_equal(fa, fb):
    assert fa.keys() == fb.keys()
    for site in fa:
        assert torch.equal(fa[site].a, fb[site].a)
        assert torch.equal(fa[site].b, fb[site].b)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": -1},
            {"batch_size": 0},
            {"lr": 0.0},
            {"lr": -0.1},
            {"lr_decay": 0.0},
            {"lr_decay": 1.5},
            {"momentum": -0.1},
            {"weight_decay": -1e-4},
            {"update_rule": "rmsprop"},
            {"epochs": 5, "lr_milestones": (5,)},
            {"epochs": 5, "lr_milestones": (-1,)},
            {"epochs": 5, "lr_milestones": (3, 2)},
            {"epochs": 5, "lr_milestones": (2, 2)},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_full_decay_allowed(self):
        assert TrainConfig(lr_decay=1.0).lr_decay == 1.0

    @pytest.mark.parametrize(
        "epochs,expected",
        [
            (10, (7, 9)),
            (20, (14, 18)),
            (5, (4,)),
            (3, (2,)),
            (2, (1,)),
            (1, ()),
            (0, ()),
        ],
    )
    def test_derived_milestones(self, epochs, expected):
        # 70% and 90% of the run, rounded; collisions and ends collapse to
        # fewer milestones rather than duplicates.
        assert TrainConfig(epochs=epochs).milestones == expected

    def test_lr_schedule_exact_floats(self):
        cfg = TrainConfig(epochs=10, lr=0.05)
        assert cfg.milestones == (7, 9)
        for epoch in range(7):
            assert cfg.lr_at(epoch) == 0.05
        assert cfg.lr_at(7) == 0.005000000000000001
        assert cfg.lr_at(8) == 0.005000000000000001
        assert cfg.lr_at(9) == 0.0005000000000000001

    def test_explicit_milestones_override(self):
        cfg = TrainConfig(epochs=10, lr=0.05, lr_milestones=(2,))
        assert cfg.lr_at(1) == 0.05
        assert cfg.lr_at(2) == 0.005000000000000001
        assert cfg.lr_at(9) == 0.005000000000000001

    def test_builds_sgd(self):
        cfg = TrainConfig(lr=0.02, momentum=0.8, weight_decay=1e-3)
        opt = cfg.build_optimizer([torch.nn.Parameter(torch.zeros(2))])
        assert isinstance(opt, torch.optim.SGD)
        group = opt.param_groups[0]
        assert group["lr"] == 0.02
        assert group["momentum"] == 0.8
        assert group["weight_decay"] == 1e-3

    def test_builds_adam_with_momentum_as_beta1(self):
        cfg = TrainConfig(lr=3e-4, momentum=0.85, update_rule="adam")
        opt = cfg.build_optimizer([torch.nn.Parameter(torch.zeros(2))])
        assert isinstance(opt, torch.optim.Adam)
        group = opt.param_groups[0]
        assert group["lr"] == 3e-4
        assert group["betas"] == (0.85, 0.999)


class TestMethodSampling:
    def test_uniform_over_registry(self, registry4):
        rng = random.Random(1234)
        counts = {m: 0 for m in registry4.methods}
        draws = 10000
        for _ in range(draws):
            counts[sample_method(rng, registry4)] += 1
        for m, c in counts.items():
            assert 0.225 <= c / draws <= 0.275, (m, c / draws)

    def test_single_method_registry(self):
        registry = MethodRegistry(("trades",))
        rng = random.Random(0)
        assert all(sample_method(rng, registry) == "trades" for _ in range(50))

    def test_empty_registry_rejected(self):
        hollow = SimpleNamespace(count=0, methods=())
        with pytest.raises(ConfigurationError):
            sample_method(random.Random(0), hollow)


class TestTrainState:
    def test_running_loss(self):
        state = TrainState()
        state.record("a", 1.0)
        state.record("a", 2.0)
        assert state.running_loss("a") == 1.5
        assert math.isnan(state.running_loss("missing"))


@pytest.fixture
def small_data():
    train, _ = make_synthetic_splits(96, 16, image_size=16, seed=3, noise=0.08)
    return train


class TestTuningLoop:
    def test_zero_epochs_leaves_adapters_at_identity(
        self, small_spec, registry4, small_data
    ):
        model, hypernet = fresh_pair(small_spec, registry4)
        trainer = make_trainer(model, hypernet, registry4, epochs=0)
        specialists = trainer.run(small_data)
        assert trainer.records == []
        for factors in specialists.values():
            for f in factors.values():
                assert torch.count_nonzero(f.b) == 0
                assert torch.count_nonzero(f.delta()) == 0

    def test_attack_seed_schedule(self, small_spec, registry4, monkeypatch):
        seen = []

        def capture(model_fn, x, y, budget, loss_kind="cross_entropy", seed=0):
            seen.append(seed)
            return SimpleNamespace(x_adv=x.clone())

        monkeypatch.setattr("hyperlora.trainer.pgd_attack", capture)
        model, hypernet = fresh_pair(small_spec, registry4)
        trainer = make_trainer(model, hypernet, registry4, seed=5)
        g = torch.Generator().manual_seed(0)
        x = torch.rand(4, 1, 16, 16, generator=g)
        y = torch.randint(0, 10, (4,), generator=g)
        for _ in range(3):
            trainer.train_step(x, y, "vanilla_at")
        base = 5 * 1_000_003
        assert seen == [base, base + 1, base + 2]

    def test_inner_attack_routing(self, small_spec, registry4, monkeypatch):
        seen = {}

        def capture(model_fn, x, y, budget, loss_kind="cross_entropy", seed=0):
            seen[len(seen)] = (loss_kind, budget)
            return SimpleNamespace(x_adv=x.clone())

        monkeypatch.setattr("hyperlora.trainer.pgd_attack", capture)
        model, hypernet = fresh_pair(small_spec, registry4)
        trainer = make_trainer(model, hypernet, registry4)
        g = torch.Generator().manual_seed(1)
        x = torch.rand(4, 1, 16, 16, generator=g)
        y = torch.randint(0, 10, (4,), generator=g)
        for method in METHODS:
            trainer.train_step(x, y, method)
        kinds = [seen[i][0] for i in range(4)]
        assert kinds == ["cross_entropy", "kl_vs_clean", "cross_entropy", "kl_vs_clean"]
        assert all(seen[i][1] == BUDGET for i in range(4))

    def test_pretrained_weights_conserved_bitwise(
        self, small_spec, registry4, small_data
    ):
        model, hypernet = fresh_pair(small_spec, registry4)
        trainer = make_trainer(model, hypernet, registry4)
        before = {k: v.clone() for k, v in model.frozen_state().items()}
        embed_before = hypernet.bank.method_embeddings.detach().clone()
        trainer.run(small_data)
        after = model.frozen_state()
        assert before.keys() == after.keys()
        for name, tensor in before.items():
            assert torch.equal(tensor, after[name]), name
        # while the trainable side actually moved
        assert not torch.equal(embed_before, hypernet.bank.method_embeddings)

    def test_zero_lr_freezes_everything(self, small_spec, registry4):
        model, hypernet = fresh_pair(small_spec, registry4)
        trainer = make_trainer(
            model, hypernet, registry4, update_rule="sgd", lr=0.1, weight_decay=0.0
        )
        trainer._set_lr(0.0)
        snap = [
            (p, p.detach().clone())
            for p in list(model.parameters()) + list(hypernet.parameters())
        ]
        g = torch.Generator().manual_seed(2)
        x = torch.rand(6, 1, 16, 16, generator=g)
        y = torch.randint(0, 10, (6,), generator=g)
        trainer.train_step(x, y, "vanilla_at")
        for p, old in snap:
            assert torch.equal(p.detach(), old)

    def test_bitwise_deterministic_runs(self, small_spec, registry4, small_data):
        results = []
        for _ in range(2):
            model, hypernet = fresh_pair(small_spec, registry4)
            trainer = make_trainer(model, hypernet, registry4)
            results.append((trainer.run(small_data), trainer.records))
        (spec_a, rec_a), (spec_b, rec_b) = results
        assert rec_a == rec_b
        assert spec_a.keys() == spec_b.keys()
        for m in spec_a:
            assert_factor_maps_equal(spec_a[m], spec_b[m])

    def test_methods_produce_distinct_adapters(self, small_spec, registry4, small_data):
        model, hypernet = fresh_pair(small_spec, registry4)
        trainer = make_trainer(model, hypernet, registry4, epochs=2)
        specialists = trainer.run(small_data)
        site = next(iter(specialists["vanilla_at"]))
        deltas = {m: specialists[m][site].delta() for m in METHODS}
        distinct = sum(
            not torch.equal(deltas[a], deltas[b])
            for i, a in enumerate(METHODS)
            for b in METHODS[i + 1 :]
        )
        assert distinct > 0

    def test_single_method_helper_matches_degenerate_loop(
        self, small_spec, small_data
    ):
        registry = MethodRegistry(("vanilla_at",))
        cfg = TrainConfig(epochs=1, batch_size=8, lr=1e-3, update_rule="adam", seed=0)
        spec = DefenseSpec("vanilla_at", BUDGET)

        model_a, hyper_a = fresh_pair(small_spec, registry)
        solo = adversarial_finetune_single(model_a, hyper_a, spec, cfg, small_data)

        model_b, hyper_b = fresh_pair(small_spec, registry)
        bank = default_defenses(BUDGET, methods=("vanilla_at",))
        looped = HyperAtTrainer(model_b, hyper_b, bank, registry, cfg).run(small_data)

        assert_factor_maps_equal(solo, looped["vanilla_at"])

    def test_loss_decreases_single_method(self, small_spec, small_data):
        registry = MethodRegistry(("vanilla_at",))
        model, hypernet = fresh_pair(small_spec, registry)
        trainer = make_trainer(model, hypernet, registry, epochs=3, batch_size=32)
        trainer.run(small_data)
        losses = [r["loss"] for r in trainer.records]
        head = sum(losses[:3]) / 3
        tail = sum(losses[-3:]) / 3
        assert tail < head

    def test_non_finite_loss_raises(self, small_spec, registry4, monkeypatch):
        def poisoned(model_fn, x, y, budget, loss_kind="cross_entropy", seed=0):
            bad = x.clone()
            bad[0, 0, 0, 0] = float("nan")
            return SimpleNamespace(x_adv=bad)

        monkeypatch.setattr("hyperlora.trainer.pgd_attack", poisoned)
        model, hypernet = fresh_pair(small_spec, registry4)
        trainer = make_trainer(model, hypernet, registry4)
        g = torch.Generator().manual_seed(3)
        x = torch.rand(4, 1, 16, 16, generator=g)
        y = torch.randint(0, 10, (4,), generator=g)
        with pytest.raises(NumericalError, match="non-finite loss for method"):
            trainer.train_step(x, y, "vanilla_at")

    def test_empty_batch_rejected(self, small_spec, registry4):
        model, hypernet = fresh_pair(small_spec, registry4)
        trainer = make_trainer(model, hypernet, registry4)
        x = torch.zeros(0, 1, 16, 16)
        y = torch.zeros(0, dtype=torch.long)
        with pytest.raises(ConfigurationError):
            trainer.train_step(x, y, "vanilla_at")

    def test_ndjson_log_schema(self, small_spec, registry4, small_data, tmp_path):
        log = tmp_path / "train.ndjson"
        model, hypernet = fresh_pair(small_spec, registry4)
        cfg = TrainConfig(epochs=1, batch_size=32, lr=1e-3, update_rule="adam", seed=0)
        bank = default_defenses(BUDGET, methods=METHODS)
        trainer = HyperAtTrainer(model, hypernet, bank, registry4, cfg, log_path=log)
        trainer.run(small_data)

        lines = log.read_text().strip().splitlines()
        assert len(lines) == len(trainer.records) > 0
        steps = []
        for line in lines:
            rec = json.loads(line)
            assert set(rec) == {"step", "epoch", "method", "loss", "lr"}
            assert rec["method"] in METHODS
            assert math.isfinite(rec["loss"])
            steps.append(rec["step"])
        assert steps == sorted(steps)
        assert len(set(steps)) == len(steps)


class TestTrainClean:
    def test_lr_steps_and_record_count(self, small_spec, small_data):
        model = VisionBackbone(small_spec, seed=0)
        cfg = TrainConfig(
            epochs=3, batch_size=32, lr=0.05, lr_milestones=(2,), seed=0
        )
        records = train_clean(model, small_data, cfg)
        assert len(records) == 3 * 3  # 96 samples, batch 32
        for rec in records:
            expected = 0.05 if rec["epoch"] < 2 else 0.005000000000000001
            assert rec["lr"] == expected
            assert rec["method"] == "clean"

    def test_learns_the_toy_task(self, small_spec):
        train, test = make_synthetic_splits(1024, 128, image_size=16, seed=3, noise=0.08)
        model = VisionBackbone(small_spec, seed=0)
        cfg = TrainConfig(epochs=10, batch_size=32, lr=1e-3, update_rule="adam", seed=0)
        records = train_clean(model, train, cfg)
        first = sum(r["loss"] for r in records[:4]) / 4
        last = sum(r["loss"] for r in records[-4:]) / 4
        assert last < first
        with torch.no_grad():
            acc = (model(test.images).argmax(-1) == test.labels).float().mean()
        assert acc > 0.9

    def test_unfreezes_every_parameter(self, small_model, small_data):
        small_model.freeze_pretrained()
        cfg = TrainConfig(epochs=0, batch_size=32)
        train_clean(small_model, small_data, cfg)
        assert all(p.requires_grad for p in small_model.parameters())
