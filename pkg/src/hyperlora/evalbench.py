"""Robustness evaluation: clean accuracy, iterated-attack accuracies, averages.

The protocol reports top-1 accuracy on the clean split, accuracy under a
20-step cross-entropy attack with 2 restarts, accuracy under a 20-step
margin attack, and the arithmetic mean of whichever of those metrics were
computed. An example counts as correct under attack only if it is classified
correctly after the attack.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import torch
from torch import Tensor

from .attacks import AttackBudget, pgd_attack
from .data import LabeledImages
from .errors import ConfigurationError

EVAL_BATCH = 256


@dataclass(frozen=True)
class EvalReport:
    """Accuracy summary in percent; absent metrics are None."""

    model_id: str
    dataset_id: str
    clean_acc: float | None = None
    pgd20_acc: float | None = None
    cw20_acc: float | None = None
    pgd_budget: AttackBudget | None = None
    cw_budget: AttackBudget | None = None

    @property
    def metrics(self) -> dict[str, float]:
        out = {}
        for name in ("clean_acc", "pgd20_acc", "cw20_acc"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out

    @property
    def average_acc(self) -> float:
        return average_accuracy(list(self.metrics.values()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["average_acc"] = self.average_acc
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def average_accuracy(values: Sequence[float]) -> float:
    """Arithmetic mean of the reported accuracy metrics."""
    if not values:
        raise ConfigurationError("no metrics to average")
    for v in values:
        if not 0.0 <= v <= 100.0:
            raise ConfigurationError(f"accuracy {v} outside [0, 100]")
    return sum(values) / len(values)


def _batched(data: LabeledImages, batch_size: int):
    for start in range(0, len(data), batch_size):
        yield data.images[start : start + batch_size], data.labels[start : start + batch_size]


def evaluate_clean(model_fn, data: LabeledImages, batch_size: int = EVAL_BATCH) -> float:
    """Top-1 accuracy in percent over the whole split."""
    if len(data) == 0:
        raise ConfigurationError("cannot evaluate on an empty split")
    correct = 0
    with torch.no_grad():
        for x, y in _batched(data, batch_size):
            correct += int((model_fn(x).argmax(dim=1) == y).sum())
    return 100.0 * correct / len(data)


def evaluate_robust(
    model_fn,
    data: LabeledImages,
    budget: AttackBudget,
    loss_kind: str = "cross_entropy",
    seed: int = 0,
    batch_size: int = EVAL_BATCH,
) -> float:
    """Accuracy in percent after attacking every example."""
    if len(data) == 0:
        raise ConfigurationError("cannot evaluate on an empty split")
    correct = 0
    for i, (x, y) in enumerate(_batched(data, batch_size)):
        adv = pgd_attack(model_fn, x, y, budget, loss_kind=loss_kind, seed=seed + i)
        adv.check(budget)
        with torch.no_grad():
            correct += int((model_fn(adv.x_adv).argmax(dim=1) == y).sum())
    return 100.0 * correct / len(data)


def evaluate_model(
    model_fn,
    data: LabeledImages,
    budget: AttackBudget,
    model_id: str = "model",
    dataset_id: str = "dataset",
    subset: int | None = 2000,
    seed: int = 0,
    attacks: Sequence[str] = ("clean", "pgd20", "cw20"),
    batch_size: int = EVAL_BATCH,
) -> EvalReport:
    """Full protocol: clean plus 20-step attacks derived from `budget`.

    The cross-entropy attack runs 2 restarts; the margin attack 1. `subset`
    bounds the number of evaluated examples (None evaluates the full split).
    """
    if subset is not None:
        data = data.subset(subset)
    pgd20 = replace(budget, iterations=20, restarts=2)
    cw20 = replace(budget, iterations=20, restarts=1)
    clean = evaluate_clean(model_fn, data, batch_size) if "clean" in attacks else None
    pgd = (
        evaluate_robust(model_fn, data, pgd20, "cross_entropy", seed, batch_size)
        if "pgd20" in attacks
        else None
    )
    cw = (
        evaluate_robust(model_fn, data, cw20, "cw_margin", seed, batch_size)
        if "cw20" in attacks
        else None
    )
    return EvalReport(
        model_id=model_id,
        dataset_id=dataset_id,
        clean_acc=clean,
        pgd20_acc=pgd,
        cw20_acc=cw,
        pgd_budget=pgd20 if pgd is not None else None,
        cw_budget=cw20 if cw is not None else None,
    )


_COLUMNS = (
    ("clean_acc", "Clean"),
    ("pgd20_acc", "PGD-20"),
    ("cw20_acc", "CW-20"),
)


def summarize(reports: Sequence[EvalReport]) -> str:
    """Aligned text table, one row per report, with the average column."""
    if not reports:
        raise ConfigurationError("nothing to summarize")
    headers = ["Model", "Dataset"] + [label for _, label in _COLUMNS] + ["Average"]
    rows = []
    for r in reports:
        cells = [r.model_id, r.dataset_id]
        for attr, _ in _COLUMNS:
            v = getattr(r, attr)
            cells.append("-" if v is None else f"{v:.2f}")
        cells.append(f"{r.average_acc:.2f}")
        rows.append(cells)
    widths = [max(len(h), *(len(row[i]) for row in rows)) for i, h in enumerate(headers)]
    def fmt(cells):
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()
    lines = [fmt(headers), fmt(["-" * w for w in widths])]
    lines.extend(fmt(row) for row in rows)
    return "\n".join(lines) + "\n"


def plot_accuracy_over_rounds(
    rounds: Sequence[int], accuracies: Sequence[float], path: str | Path
) -> bool:
    """Optional line plot of accuracy against tuning rounds; needs matplotlib."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return False
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(list(rounds), list(accuracies), marker="o")
    ax.set_xlabel("coefficient tuning rounds")
    ax.set_ylabel("accuracy (%)")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True
