"""Stage orchestration: pretrain, adversarially tune, merge, coefficient-tune,
evaluate, attack, and the ablation sweeps.

Every stage reads a checkpoint produced by the previous stage, writes a new
checkpoint plus logs under its output directory, and records the config so
any artifact can be reproduced from disk alone.

Checkpoint array naming:
  backbone/<param>                       all backbone parameters
  hyper/<param>                          embedding bank + decode heads
  specialist/<method>/<layer>.<pos>/a|b  per-method low-rank factors
  merge/lambda                           (methods x layers) mixing weights
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from torch import Tensor

from .attacks import pgd_attack
from .backbone import InjectionSite, VisionBackbone
from .checkpoint import (
    STAGE_HYPERAT,
    STAGE_HYPERAT_PLUS,
    STAGE_MERGED,
    STAGE_PRETRAINED,
    CheckpointBundle,
    load_checkpoint,
    require_stage,
    save_checkpoint,
)
from .config import ExperimentConfig, config_hash
from .data import LabeledImages, load_dataset, make_synthetic_splits
from .defenses import DefenseBank, default_defenses
from .errors import ConfigurationError, IntegrityError
from .evalbench import EvalReport, evaluate_model, summarize
from .hypernet import LoraHypernetwork, MethodRegistry, build_hypernetwork
from .merging import (
    MergeCoefficients,
    combine_deltas,
    even_coefficients,
    merge_equal,
    optimize_coefficients,
    save_coefficients,
)
from .trainer import HyperAtTrainer, train_clean

SpecialistDeltas = dict[str, dict[InjectionSite, Tensor]]


# -- data ---------------------------------------------------------------


def load_split(cfg: ExperimentConfig, split: str) -> LabeledImages:
    ds = cfg.dataset
    if ds.data_format == "synthetic":
        train, test = make_synthetic_splits(
            ds.train_size,
            ds.test_size,
            image_size=ds.image_size,
            channels=ds.channels,
            num_classes=ds.num_classes,
            seed=cfg.seed,
            noise=ds.noise,
        )
        return train if split == "train" else test
    data = load_dataset(ds.path, ds.data_format, split, image_size=ds.image_size)
    cap = ds.train_size if split == "train" else ds.test_size
    return data.shuffled(cfg.seed).subset(cap)


# -- checkpoint array packing -------------------------------------------


def _module_arrays(module: torch.nn.Module, prefix: str) -> dict[str, Tensor]:
    return {f"{prefix}/{name}": p.detach() for name, p in module.named_parameters()}


def _specialist_arrays(specialists: Mapping[str, Mapping]) -> dict[str, Tensor]:
    out = {}
    for method, factors in specialists.items():
        for site, f in factors.items():
            out[f"specialist/{method}/{site.key}/a"] = f.a.detach()
            out[f"specialist/{method}/{site.key}/b"] = f.b.detach()
    return out


def _restore_module(module: torch.nn.Module, bundle: CheckpointBundle, prefix: str) -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(bundle.tensor(f"{prefix}/{name}"))


def restore_backbone(cfg: ExperimentConfig, bundle: CheckpointBundle) -> VisionBackbone:
    model = VisionBackbone(cfg.backbone, seed=cfg.seed)
    _restore_module(model, bundle, "backbone")
    model.eval()
    return model


def restore_hypernet(
    cfg: ExperimentConfig, model: VisionBackbone, bundle: CheckpointBundle
) -> LoraHypernetwork:
    registry = MethodRegistry(cfg.methods)
    hypernet = build_hypernetwork(
        model,
        registry,
        rank=cfg.adapter.rank,
        alpha=cfg.adapter.alpha,
        embed_dim=cfg.adapter.embed_dim,
        context_dim=cfg.adapter.context_dim,
        seed=cfg.seed,
    )
    _restore_module(hypernet, bundle, "hyper")
    return hypernet


def restore_specialists(
    cfg: ExperimentConfig, model: VisionBackbone, bundle: CheckpointBundle
) -> SpecialistDeltas:
    scale = (cfg.adapter.alpha or cfg.adapter.rank) / cfg.adapter.rank
    out: SpecialistDeltas = {}
    for method in cfg.methods:
        deltas = {}
        for site in model.sites:
            a = bundle.tensor(f"specialist/{method}/{site.key}/a")
            b = bundle.tensor(f"specialist/{method}/{site.key}/b")
            deltas[site] = scale * (b @ a)
        out[method] = deltas
    return out


def restore_coefficients(cfg: ExperimentConfig, bundle: CheckpointBundle) -> MergeCoefficients:
    lam = bundle.tensor("merge/lambda").to(torch.float32)
    return MergeCoefficients(tuple(cfg.methods), lam, cfg.merge.tradeoff_kl)


def _load_config_for(bundle_path: str | Path, cfg: ExperimentConfig | None) -> ExperimentConfig:
    if cfg is not None:
        return cfg
    path = Path(bundle_path) / "config.json"
    if not path.exists():
        raise ConfigurationError(
            f"no config given and none stored beside checkpoint {bundle_path}"
        )
    return ExperimentConfig.load(path)


def _write_stage(
    out_dir: Path,
    stage: str,
    arrays: Mapping[str, Tensor],
    cfg: ExperimentConfig,
    meta: Mapping | None = None,
) -> Path:
    path = save_checkpoint(
        out_dir, stage, arrays, config_hash=config_hash(cfg), meta=meta
    )
    cfg.save(out_dir / "config.json")
    return path


# -- stages --------------------------------------------------------------


def run_pretrain(cfg: ExperimentConfig, out_dir: str | Path) -> Path:
    """Standard training of the backbone from scratch."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = VisionBackbone(cfg.backbone, seed=cfg.seed)
    data = load_split(cfg, "train")
    train_clean(model, data, cfg.pretrain, log_path=out / "pretrain_log.ndjson")
    return _write_stage(out, STAGE_PRETRAINED, _module_arrays(model, "backbone"), cfg)


def run_train(
    cfg: ExperimentConfig | None, pretrain_ckpt: str | Path, out_dir: str | Path
) -> Path:
    """Multi-defense adversarial tuning on top of a pretrained backbone."""
    bundle = load_checkpoint(pretrain_ckpt)
    require_stage(bundle, (STAGE_PRETRAINED,), "adversarial tuning")
    cfg = _load_config_for(pretrain_ckpt, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model = restore_backbone(cfg, bundle)
    registry = MethodRegistry(cfg.methods)
    hypernet = build_hypernetwork(
        model,
        registry,
        rank=cfg.adapter.rank,
        alpha=cfg.adapter.alpha,
        embed_dim=cfg.adapter.embed_dim,
        context_dim=cfg.adapter.context_dim,
        seed=cfg.seed,
    )
    defenses = default_defenses(
        cfg.attack,
        methods=cfg.methods,
        beta=cfg.defense.beta,
        lambda_weight=cfg.defense.lambda_weight,
        w_mse=cfg.defense.w_mse,
        w_ce=cfg.defense.w_ce,
    )
    trainer = HyperAtTrainer(
        model, hypernet, defenses, registry, cfg.train, log_path=out / "train_log.ndjson"
    )
    specialists = trainer.run(load_split(cfg, "train"))

    arrays: dict[str, Tensor] = {}
    arrays.update(_module_arrays(model, "backbone"))
    arrays.update(_module_arrays(hypernet, "hyper"))
    arrays.update(_specialist_arrays(specialists))
    return _write_stage(out, STAGE_HYPERAT, arrays, cfg)


def run_merge(
    cfg: ExperimentConfig | None,
    ckpt: str | Path,
    out_dir: str | Path,
    mode: str = "equal",
) -> Path:
    """Even merge of the specialist adapters."""
    if mode != "equal":
        raise ConfigurationError(f"unknown merge mode {mode!r}; known: ['equal']")
    bundle = load_checkpoint(ckpt)
    require_stage(bundle, (STAGE_HYPERAT,), "merging")
    cfg = _load_config_for(ckpt, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model = restore_backbone(cfg, bundle)
    coeffs = even_coefficients(
        tuple(cfg.methods), cfg.backbone.depth, cfg.merge.tradeoff_kl
    )
    arrays = {
        name: bundle.tensor(name)
        for name in bundle.arrays
        if name.startswith(("backbone/", "hyper/", "specialist/"))
    }
    arrays["merge/lambda"] = coeffs.lam
    save_coefficients(coeffs, out / "coefficients.json")
    return _write_stage(out, STAGE_MERGED, arrays, cfg, meta={"merge_mode": mode})


def run_tune_plus(
    cfg: ExperimentConfig | None,
    ckpt: str | Path,
    out_dir: str | Path,
    iterations: int | None = None,
) -> Path:
    """Coefficient optimization on one fixed training minibatch."""
    bundle = load_checkpoint(ckpt)
    require_stage(bundle, (STAGE_HYPERAT, STAGE_MERGED), "coefficient tuning")
    cfg = _load_config_for(ckpt, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model = restore_backbone(cfg, bundle)
    specialists = restore_specialists(cfg, model, bundle)
    if "merge/lambda" in bundle.arrays:
        coeffs = restore_coefficients(cfg, bundle)
    else:
        coeffs = even_coefficients(
            tuple(cfg.methods), cfg.backbone.depth, cfg.merge.tradeoff_kl
        )

    batch = load_split(cfg, "train").shuffled(cfg.seed).subset(cfg.merge.batch_size)
    rounds = cfg.merge.iterations if iterations is None else iterations
    tuned, history = optimize_coefficients(
        model,
        specialists,
        coeffs,
        batch.images,
        batch.labels,
        cfg.attack,
        iterations=rounds,
        lr=cfg.merge.lr,
        seed=cfg.seed,
    )

    arrays = {
        name: bundle.tensor(name)
        for name in bundle.arrays
        if name.startswith(("backbone/", "hyper/", "specialist/"))
    }
    arrays["merge/lambda"] = tuned.lam
    save_coefficients(tuned, out / "coefficients.json")
    (out / "surrogate_history.json").write_text(json.dumps(history) + "\n")
    return _write_stage(
        out, STAGE_HYPERAT_PLUS, arrays, cfg, meta={"rounds": rounds}
    )


# -- evaluation ----------------------------------------------------------


def build_model_fn(
    cfg: ExperimentConfig, bundle: CheckpointBundle, method: str | None = None
):
    """Forward closure for a checkpoint, honoring its stage; returns (fn, id)."""
    model = restore_backbone(cfg, bundle)
    if bundle.stage == STAGE_PRETRAINED:
        if method is not None:
            raise ConfigurationError("a pretrained checkpoint has no specialists")
        return (lambda x: model(x)), "pretrained"

    specialists = restore_specialists(cfg, model, bundle)
    if method is not None:
        if method not in specialists:
            raise ConfigurationError(
                f"method {method!r} not in checkpoint; known: {list(specialists)}"
            )
        deltas = specialists[method]
        return (lambda x: model(x, deltas)), f"specialist:{method}"

    if bundle.stage == STAGE_HYPERAT:
        merged = merge_equal(specialists).deltas
        return (lambda x: model(x, merged)), "even_merge"
    coeffs = restore_coefficients(cfg, bundle)
    merged = combine_deltas(specialists, coeffs)
    tag = "tuned_merge" if bundle.stage == STAGE_HYPERAT_PLUS else "even_merge"
    return (lambda x: model(x, merged)), tag


def run_eval(
    cfg: ExperimentConfig | None,
    ckpt: str | Path,
    out_dir: str | Path,
    subset: int | None = None,
    method: str | None = None,
    seed: int | None = None,
    attacks: Sequence[str] = ("clean", "pgd20", "cw20"),
) -> EvalReport:
    """Clean + attacked accuracies for one checkpoint; writes report files."""
    bundle = load_checkpoint(ckpt)
    cfg = _load_config_for(ckpt, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model_fn, model_id = build_model_fn(cfg, bundle, method)
    data = load_split(cfg, "test")
    report = evaluate_model(
        model_fn,
        data,
        cfg.attack,
        model_id=model_id,
        dataset_id=cfg.dataset.data_format,
        subset=subset if subset is not None else cfg.dataset.eval_subset,
        seed=cfg.seed if seed is None else seed,
        attacks=tuple(attacks),
    )
    report.save(out / f"report_{model_id.replace(':', '_')}.json")
    (out / f"report_{model_id.replace(':', '_')}.txt").write_text(summarize([report]))
    return report


def run_attack(
    cfg: ExperimentConfig | None,
    ckpt: str | Path,
    out_dir: str | Path,
    n: int = 128,
    loss_kind: str = "cross_entropy",
    save_examples: bool = True,
) -> dict:
    """Craft one adversarial batch against a checkpoint and report statistics."""
    bundle = load_checkpoint(ckpt)
    cfg = _load_config_for(ckpt, cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model_fn, model_id = build_model_fn(cfg, bundle)
    data = load_split(cfg, "test").subset(n)
    adv = pgd_attack(
        model_fn, data.images, data.labels, cfg.attack, loss_kind=loss_kind, seed=cfg.seed
    )
    adv.check(cfg.attack)
    with torch.no_grad():
        clean_pred = model_fn(data.images).argmax(dim=1)
        adv_pred = model_fn(adv.x_adv).argmax(dim=1)
    stats = {
        "model_id": model_id,
        "examples": len(data),
        "loss_kind": loss_kind,
        "epsilon": cfg.attack.epsilon,
        "iterations": cfg.attack.iterations,
        "clean_accuracy": 100.0 * int((clean_pred == data.labels).sum()) / len(data),
        "adversarial_accuracy": 100.0 * int((adv_pred == data.labels).sum()) / len(data),
        "max_abs_delta": float(adv.delta.abs().max()),
        "mean_abs_delta": float(adv.delta.abs().mean()),
    }
    (out / "attack_stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    if save_examples:
        np.savez(
            out / "adversarial_batch.npz",
            x=data.images.numpy(),
            x_adv=adv.x_adv.numpy(),
            y=data.labels.numpy(),
            adv_pred=adv_pred.numpy(),
        )
    return stats


# -- ablations ------------------------------------------------------------


def run_ablation(
    cfg: ExperimentConfig,
    out_dir: str | Path,
    method_counts: Sequence[int] = (1, 2, 3, 4),
    ranks: Sequence[int] = (8, 16),
    subset: int | None = None,
) -> str:
    """Sweep the number of combined methods and the adapter rank end to end.

    Each sweep point pretrains once (shared), tunes, merges evenly, and
    evaluates; emits one comparable report per point plus a combined table.
    """
    from dataclasses import replace

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pre = run_pretrain(cfg, out / "pretrain")
    reports: list[EvalReport] = []

    for k in method_counts:
        if not 1 <= k <= len(cfg.methods):
            raise ConfigurationError(
                f"cannot combine {k} methods, config lists {len(cfg.methods)}"
            )
        sub = replace(cfg, methods=tuple(cfg.methods[:k]))
        point = out / f"methods_{k}"
        ck = run_train(sub, pre, point / "train")
        ck = run_merge(sub, ck, point / "merge")
        rep = run_eval(sub, ck, point / "eval", subset=subset)
        reports.append(
            replace_report_id(rep, f"M={k}:" + "+".join(sub.methods))
        )

    for r in ranks:
        sub = replace(cfg, adapter=replace(cfg.adapter, rank=r))
        point = out / f"rank_{r}"
        ck = run_train(sub, pre, point / "train")
        ck = run_merge(sub, ck, point / "merge")
        rep = run_eval(sub, ck, point / "eval", subset=subset)
        reports.append(replace_report_id(rep, f"r={r}"))

    table = summarize(reports)
    (out / "ablation_table.txt").write_text(table)
    (out / "ablation_reports.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
    )
    return table


def replace_report_id(report: EvalReport, model_id: str) -> EvalReport:
    from dataclasses import replace

    return replace(report, model_id=model_id)
