"""Combining per-method adapter deltas into one model.

Stage one averages the specialist deltas evenly. Stage two treats the
per-(method, layer) mixing weights as the only free parameters and tunes
them with a few rounds of adaptive gradient descent on a single reused
training minibatch, minimizing clean cross-entropy plus a weighted KL term
between clean and attacked predictions. Everything else stays frozen,
bit for bit.

Merging always operates on full delta matrices (the low-rank product),
never on the factor halves separately, so the merged delta is linear in
the mixing weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping

import torch
import torch.nn.functional as F
from torch import Tensor

from .attacks import AttackBudget, pgd_attack
from .backbone import InjectionSite, VisionBackbone
from .defenses import kl_divergence
from .errors import ConfigurationError, NumericalError

DeltaMap = Mapping[InjectionSite, Tensor]


@dataclass(frozen=True)
class MergeCoefficients:
    """Per-(method, layer) mixing weights plus the surrogate's KL weight."""

    methods: tuple[str, ...]
    lam: Tensor  # (num_methods, num_layers)
    tradeoff_kl: float = 1.0

    def __post_init__(self) -> None:
        if self.lam.dim() != 2 or self.lam.shape[0] != len(self.methods):
            raise ConfigurationError(
                f"lam must be (num_methods={len(self.methods)}, num_layers), "
                f"got {tuple(self.lam.shape)}"
            )
        if not torch.isfinite(self.lam).all():
            raise NumericalError("mixing weights must be finite")

    @property
    def num_layers(self) -> int:
        return self.lam.shape[1]

    def row(self, method: str) -> int:
        try:
            return self.methods.index(method)
        except ValueError:
            raise ConfigurationError(
                f"method {method!r} not in coefficient table {self.methods}"
            ) from None


def even_coefficients(
    methods: tuple[str, ...], num_layers: int, tradeoff_kl: float = 1.0
) -> MergeCoefficients:
    """The stage-one default: every weight is 1/num_methods."""
    m = len(methods)
    if m < 1 or num_layers < 1:
        raise ConfigurationError("need at least one method and one layer")
    lam = torch.full((m, num_layers), 1.0 / m, dtype=torch.float32)
    return MergeCoefficients(methods, lam, tradeoff_kl)


@dataclass(frozen=True)
class MergedAdapter:
    """Final per-site additive weight updates."""

    deltas: dict[InjectionSite, Tensor]


def _check_site_sets(specialists: Mapping[str, DeltaMap]) -> tuple[InjectionSite, ...]:
    if not specialists:
        raise ConfigurationError("no specialists to merge")
    site_sets = {m: frozenset(d.keys()) for m, d in specialists.items()}
    reference = next(iter(site_sets.values()))
    for method, sites in site_sets.items():
        if sites != reference:
            raise ConfigurationError(
                f"specialist {method!r} covers different sites than the others"
            )
    return tuple(sorted(reference, key=lambda s: (s.layer_index, s.position)))


def combine_deltas(
    specialists: Mapping[str, DeltaMap], coeffs: MergeCoefficients
) -> dict[InjectionSite, Tensor]:
    """Weighted per-site sum: delta(site) = sum_m lam[m, layer] * delta_m(site).

    Differentiable in `coeffs.lam`, so the same code path serves both the
    even merge and coefficient optimization.
    """
    sites = _check_site_sets(specialists)
    missing = [m for m in specialists if m not in coeffs.methods]
    if missing:
        raise ConfigurationError(f"no mixing weights for methods {missing}")
    out: dict[InjectionSite, Tensor] = {}
    for site in sites:
        if site.layer_index >= coeffs.num_layers:
            raise ConfigurationError(
                f"site layer {site.layer_index} outside coefficient table "
                f"with {coeffs.num_layers} layers"
            )
        total = None
        for method in specialists:
            term = coeffs.lam[coeffs.row(method), site.layer_index] * specialists[method][site]
            total = term if total is None else total + term
        out[site] = total
    return out


def merge_equal(specialists: Mapping[str, DeltaMap]) -> MergedAdapter:
    """Arithmetic mean of the specialist deltas (weights 1/num_methods)."""
    sites = _check_site_sets(specialists)
    num_layers = max(s.layer_index for s in sites) + 1
    coeffs = even_coefficients(tuple(specialists.keys()), num_layers)
    return MergedAdapter(combine_deltas(specialists, coeffs))


def merged_forward(
    model: VisionBackbone,
    specialists: Mapping[str, DeltaMap],
    coeffs: MergeCoefficients,
    x: Tensor,
) -> Tensor:
    return model(x, combine_deltas(specialists, coeffs))


def merge_surrogate(
    model: VisionBackbone,
    specialists: Mapping[str, DeltaMap],
    coeffs: MergeCoefficients,
    x: Tensor,
    x_adv: Tensor,
    y: Tensor,
) -> Tensor:
    """Clean cross-entropy plus tradeoff_kl times KL(clean pred || attacked pred)."""
    deltas = combine_deltas(specialists, coeffs)
    logits_clean = model(x, deltas)
    p = F.softmax(logits_clean, dim=1)
    q = F.softmax(model(x_adv, deltas), dim=1)
    return F.cross_entropy(logits_clean, y) + coeffs.tradeoff_kl * kl_divergence(p, q).mean()


def optimize_coefficients(
    model: VisionBackbone,
    specialists: Mapping[str, DeltaMap],
    coeffs: MergeCoefficients,
    x: Tensor,
    y: Tensor,
    budget: AttackBudget,
    iterations: int = 7,
    lr: float = 1e-2,
    seed: int = 0,
) -> tuple[MergeCoefficients, list[float]]:
    """Tune the mixing weights on one fixed minibatch.

    Each round regenerates a fresh adversarial batch against the current
    merge, evaluates the surrogate, and applies one adaptive-moment step to
    the mixing weights alone; no model or specialist tensor is touched.
    Returns the tuned coefficients and the surrogate trace (initial value
    first, post-round values after).
    """
    if iterations < 0:
        raise ConfigurationError(f"iterations must be >= 0, got {iterations}")
    if iterations == 0:
        return coeffs, []

    lam = coeffs.lam.detach().clone().requires_grad_(True)
    optimizer = torch.optim.Adam([lam], lr=lr)
    history: list[float] = []

    def surrogate(current: Tensor, attack_seed: int) -> Tensor:
        live = replace(coeffs, lam=current)
        frozen = replace(coeffs, lam=current.detach())
        adv = pgd_attack(
            lambda inp: merged_forward(model, specialists, frozen, inp),
            x,
            y,
            budget,
            loss_kind="cross_entropy",
            seed=attack_seed,
        )
        return merge_surrogate(model, specialists, live, x, adv.x_adv, y)

    for round_index in range(iterations):
        value = surrogate(lam, seed + round_index)
        if not torch.isfinite(value):
            raise NumericalError(f"non-finite merge surrogate at round {round_index}")
        history.append(float(value.detach()))
        (grad,) = torch.autograd.grad(value, lam)
        optimizer.zero_grad(set_to_none=True)
        lam.grad = grad
        optimizer.step()

    # Post-update value; built from detached weights so no graph reaches lam.
    final = surrogate(lam.detach(), seed + iterations)
    if not torch.isfinite(final):
        raise NumericalError(f"non-finite merge surrogate at round {iterations}")
    history.append(float(final.detach()))

    return replace(coeffs, lam=lam.detach().clone()), history


def save_coefficients(coeffs: MergeCoefficients, path: str | Path) -> None:
    """Dump as JSON records {method, layer, value} plus the KL weight."""
    entries = [
        {"method": m, "layer": l, "value": float(coeffs.lam[i, l])}
        for i, m in enumerate(coeffs.methods)
        for l in range(coeffs.num_layers)
    ]
    doc = {
        "methods": list(coeffs.methods),
        "num_layers": coeffs.num_layers,
        "tradeoff_kl": coeffs.tradeoff_kl,
        "entries": entries,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_coefficients(path: str | Path) -> MergeCoefficients:
    try:
        doc = json.loads(Path(path).read_text())
        methods = tuple(doc["methods"])
        lam = torch.zeros(len(methods), int(doc["num_layers"]), dtype=torch.float32)
        for e in doc["entries"]:
            lam[methods.index(e["method"]), int(e["layer"])] = float(e["value"])
        return MergeCoefficients(methods, lam, float(doc["tradeoff_kl"]))
    except (KeyError, ValueError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"malformed coefficient file {path}: {e}") from e
