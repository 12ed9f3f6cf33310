"""Build-time calibration of the directional-experiment thresholds.

Runs the full desk pipeline once (pretrain, 4-method tuning, even merge,
coefficient tuning) and prints every number the acceptance suite freezes:
baseline robust accuracy, merged robust/clean accuracy, per-specialist
accuracies, and the surrogate trace.
"""

import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from hyperlora.attacks import AttackBudget
from hyperlora.backbone import BackboneSpec
from hyperlora.config import (
    AdapterConfig,
    DatasetConfig,
    ExperimentConfig,
    MergeConfig,
)
from hyperlora.trainer import TrainConfig
from hyperlora import experiments

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else "/tmp/calib")


def acceptance_config() -> ExperimentConfig:
    return ExperimentConfig(
        backbone=BackboneSpec(
            image_size=28, patch_size=4, channels=1, embed_dim=32, depth=2, heads=4
        ),
        methods=("vanilla_at", "trades", "mart", "dkl"),
        adapter=AdapterConfig(rank=16),
        train=TrainConfig(
            epochs=10, batch_size=128, lr=3e-4, update_rule="adam", seed=0
        ),
        pretrain=TrainConfig(
            epochs=5, batch_size=128, lr=1e-3, update_rule="adam", seed=0
        ),
        attack=AttackBudget(0.1, 0.02, iterations=10),
        merge=MergeConfig(iterations=7, lr=1e-2, batch_size=128),
        dataset=DatasetConfig(
            train_size=10000, test_size=2000, eval_subset=1000, image_size=28
        ),
        seed=0,
    )


def main() -> None:
    cfg = acceptance_config()
    t0 = time.time()

    def tick(msg):
        print(f"[{time.time() - t0:7.1f}s] {msg}", flush=True)

    OUT.mkdir(parents=True, exist_ok=True)
    pre = experiments.run_pretrain(cfg, OUT / "pretrain")
    tick("pretrain done")
    base = experiments.run_eval(cfg, pre, OUT / "eval_base")
    tick(f"baseline: {base.to_dict()}")

    tr = experiments.run_train(cfg, pre, OUT / "train")
    tick("hyperat done")
    mg = experiments.run_merge(cfg, tr, OUT / "merge")
    merged = experiments.run_eval(cfg, mg, OUT / "eval_merge")
    tick(f"even merge: {merged.to_dict()}")

    per_method = {}
    for m in cfg.methods:
        rep = experiments.run_eval(cfg, tr, OUT / f"eval_{m}", method=m)
        per_method[m] = rep.to_dict()
        tick(f"specialist {m}: {rep.to_dict()}")

    tp = experiments.run_tune_plus(cfg, mg, OUT / "tune_plus")
    hist = json.loads((OUT / "tune_plus" / "surrogate_history.json").read_text())
    tick(f"surrogate history: {hist}")
    plus = experiments.run_eval(cfg, tp, OUT / "eval_plus")
    tick(f"tuned merge: {plus.to_dict()}")

    summary = {
        "baseline": base.to_dict(),
        "even_merge": merged.to_dict(),
        "specialists": per_method,
        "tuned_merge": plus.to_dict(),
        "surrogate_history": hist,
        "wall_seconds": time.time() - t0,
    }
    (OUT / "calibration.json").write_text(json.dumps(summary, indent=2) + "\n")
    tick("calibration written")


if __name__ == "__main__":
    main()
