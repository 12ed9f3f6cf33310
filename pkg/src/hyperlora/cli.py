"""Command-line entry point tying the stages into reproducible runs.

Subcommands: pretrain, train, merge, tune-plus, eval, attack, ablation.
Every run writes its checkpoint, logs, and the exact config used under the
output directory. Flags override config-file values; the output root can
also come from the HYPERLORA_OUTPUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import experiments
from .config import ExperimentConfig, desk_config
from .errors import HyperLoraError

OUTPUT_ROOT_ENV = "HYPERLORA_OUTPUT_ROOT"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--output", "-o", help="output directory for this stage")
    p.add_argument("--seed", type=int, help="experiment seed")
    p.add_argument("--methods", help="comma-separated defense method ids")
    p.add_argument("--rank", type=int, help="adapter rank")
    p.add_argument("--data-format", dest="data_format", help="dataset format")
    p.add_argument("--data-path", dest="data_path", help="dataset location")
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--epochs", type=int, help="tuning epochs")


def _build_parser() -> argparse.ArgumentParser:
    root = argparse.ArgumentParser(
        prog="hyperlora",
        description=(
            "Multi-defense adversarial tuning of a small vision transformer "
            "via hypernetwork-generated low-rank adapters"
        ),
    )
    sub = root.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="standard training of the backbone")
    _add_common(p)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)

    p = sub.add_parser("train", help="multi-defense adapter tuning")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint dir")

    p = sub.add_parser("merge", help="even merge of specialist adapters")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="tuned checkpoint dir")
    p.add_argument("--mode", default="equal", help="merge mode (equal)")

    p = sub.add_parser("tune-plus", help="optimize merging coefficients")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="tuned or merged checkpoint")
    p.add_argument("--iters", type=int, help="coefficient tuning rounds")

    p = sub.add_parser("eval", help="clean/attacked accuracy report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--subset", type=int, help="number of test examples")
    p.add_argument("--method", help="evaluate one specialist instead of the merge")
    p.add_argument(
        "--budget",
        default="all",
        choices=["all", "clean", "pgd20", "cw20"],
        help="which metrics to compute",
    )

    p = sub.add_parser("attack", help="craft one adversarial batch and report stats")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=128, help="batch size to attack")
    p.add_argument(
        "--loss",
        default="cross_entropy",
        choices=["cross_entropy", "kl_vs_clean", "cw_margin"],
    )
    p.add_argument("--no-save-examples", action="store_true")

    p = sub.add_parser("ablation", help="method-count and rank sweeps")
    _add_common(p)
    p.add_argument("--method-counts", dest="method_counts", default="1,2,3,4")
    p.add_argument("--ranks", default="8,16")
    p.add_argument("--subset", type=int)
    return root


def _apply_overrides(cfg: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "methods", None):
        cfg = replace(cfg, methods=tuple(m.strip() for m in args.methods.split(",")))
    if getattr(args, "rank", None) is not None:
        cfg = replace(cfg, adapter=replace(cfg.adapter, rank=args.rank))
    ds = cfg.dataset
    if getattr(args, "data_format", None):
        ds = replace(ds, data_format=args.data_format)
    if getattr(args, "data_path", None):
        ds = replace(ds, path=args.data_path)
    if getattr(args, "train_size", None) is not None:
        ds = replace(ds, train_size=args.train_size)
    if getattr(args, "test_size", None) is not None:
        ds = replace(ds, test_size=args.test_size)
    if ds is not cfg.dataset:
        cfg = replace(cfg, dataset=ds)
    if getattr(args, "epochs", None) is not None:
        cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs))
    if getattr(args, "pretrain_epochs", None) is not None:
        cfg = replace(cfg, pretrain=replace(cfg.pretrain, epochs=args.pretrain_epochs))
    if getattr(args, "iters", None) is not None:
        cfg = replace(cfg, merge=replace(cfg.merge, iterations=args.iters))
    return cfg


def _resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = desk_config()
    return _apply_overrides(cfg, args)


def _out_dir(args: argparse.Namespace, cfg: ExperimentConfig, stage: str) -> Path:
    if getattr(args, "output", None):
        return Path(args.output)
    root = os.environ.get(OUTPUT_ROOT_ENV, cfg.output_dir)
    return Path(root) / stage


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse usage errors carry their own code
        return int(e.code or 0)

    try:
        cfg = _resolve_config(args)
        if args.command == "pretrain":
            path = experiments.run_pretrain(cfg, _out_dir(args, cfg, "pretrain"))
            print(f"pretrained checkpoint: {path}")
        elif args.command == "train":
            path = experiments.run_train(cfg, args.checkpoint, _out_dir(args, cfg, "train"))
            print(f"tuned checkpoint: {path}")
        elif args.command == "merge":
            path = experiments.run_merge(
                cfg, args.checkpoint, _out_dir(args, cfg, "merge"), mode=args.mode
            )
            print(f"merged checkpoint: {path}")
        elif args.command == "tune-plus":
            path = experiments.run_tune_plus(
                cfg, args.checkpoint, _out_dir(args, cfg, "tune_plus"), iterations=args.iters
            )
            print(f"coefficient-tuned checkpoint: {path}")
        elif args.command == "eval":
            attacks = {
                "all": ("clean", "pgd20", "cw20"),
                "clean": ("clean",),
                "pgd20": ("clean", "pgd20"),
                "cw20": ("clean", "cw20"),
            }[args.budget]
            report = experiments.run_eval(
                cfg,
                args.checkpoint,
                _out_dir(args, cfg, "eval"),
                subset=args.subset,
                method=args.method,
                attacks=attacks,
            )
            from .evalbench import summarize

            print(summarize([report]), end="")
        elif args.command == "attack":
            stats = experiments.run_attack(
                cfg,
                args.checkpoint,
                _out_dir(args, cfg, "attack"),
                n=args.n,
                loss_kind=args.loss,
                save_examples=not args.no_save_examples,
            )
            print(
                f"{stats['model_id']}: clean {stats['clean_accuracy']:.2f}% -> "
                f"attacked {stats['adversarial_accuracy']:.2f}% "
                f"(eps {stats['epsilon']:.4f}, {stats['examples']} examples)"
            )
        elif args.command == "ablation":
            counts = tuple(int(x) for x in args.method_counts.split(","))
            ranks = tuple(int(x) for x in args.ranks.split(","))
            table = experiments.run_ablation(
                cfg,
                _out_dir(args, cfg, "ablation"),
                method_counts=counts,
                ranks=ranks,
                subset=args.subset,
            )
            print(table, end="")
        else:  # pragma: no cover
            parser.error(f"unknown command {args.command!r}")
    except HyperLoraError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
