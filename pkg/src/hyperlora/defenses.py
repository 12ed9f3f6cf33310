"""Per-method adversarial training objectives and shared divergence primitives.

Four defenses are registered by default: plain adversarial cross-entropy,
a clean-loss-plus-KL tradeoff, a misclassification-aware objective, and a
decoupled divergence variant. A fifth (probability-distance regularizer,
"score") is implemented but not registered unless asked for.

Each defense declares which attack objective generates its inner
adversarial examples: the KL-regularized methods attack the divergence from
the clean prediction, the others attack cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor

from .attacks import AttackBudget
from .errors import ConfigurationError, DimensionError

_PROB_FLOOR = 1e-12
_SUM_TOL = 1e-6


def _check_probs(p: Tensor, q: Tensor) -> None:
    if p.shape != q.shape:
        raise DimensionError(
            f"probability vectors disagree: {tuple(p.shape)} vs {tuple(q.shape)}"
        )
    for name, t in (("p", p), ("q", q)):
        sums = t.sum(dim=-1)
        if (sums - 1.0).abs().max().item() > _SUM_TOL:
            raise ConfigurationError(f"{name} rows must sum to 1 within {_SUM_TOL}")


def kl_divergence(p: Tensor, q: Tensor) -> Tensor:
    """KL(p || q) over the last axis, probabilities clamped to [1e-12, 1].

    Returns a scalar tensor for vectors, a per-row tensor for batches.
    """
    _check_probs(p, q)
    pc = p.clamp(_PROB_FLOOR, 1.0)
    qc = q.clamp(_PROB_FLOOR, 1.0)
    return (pc * (pc.log() - qc.log())).sum(dim=-1)


def decoupled_divergence(
    p: Tensor,
    q: Tensor,
    w_mse: float = 1.0,
    w_ce: float = 1.0,
    stop_gradient: bool = True,
) -> Tensor:
    """Two-part divergence: squared probability gap plus cross-prediction term.

    The squared-difference part passes gradients through both arguments; the
    cross term treats p as a constant target when `stop_gradient` is set.
    With w_mse=0, w_ce=1, stop_gradient=False this exceeds KL(p||q) by
    exactly the entropy of p.
    """
    _check_probs(p, q)
    mse = ((p - q) ** 2).sum(dim=-1)
    target = p.detach() if stop_gradient else p
    ce = -(target * q.clamp(_PROB_FLOOR, 1.0).log()).sum(dim=-1)
    return w_mse * mse + w_ce * ce


def loss_vanilla_at(model_fn, x_adv: Tensor, y: Tensor) -> Tensor:
    """Mean cross-entropy on the attacked batch."""
    return F.cross_entropy(model_fn(x_adv), y)


def loss_trades(model_fn, x: Tensor, x_adv: Tensor, y: Tensor, beta: float = 6.0) -> Tensor:
    """Clean cross-entropy plus beta times KL from clean to attacked prediction."""
    logits_clean = model_fn(x)
    p = F.softmax(logits_clean, dim=1)
    q = F.softmax(model_fn(x_adv), dim=1)
    return F.cross_entropy(logits_clean, y) + beta * kl_divergence(p, q).mean()


def loss_mart(
    model_fn, x: Tensor, x_adv: Tensor, y: Tensor, lambda_weight: float = 5.0
) -> Tensor:
    """Margin-boosted adversarial cross-entropy with a misclassification-weighted
    KL regularizer.

    The boosted term adds -log(1 - top wrong-class probability) on the
    attacked batch; the KL term is weighted per example by how unsure the
    clean prediction is about the true class.
    """
    logits_adv = model_fn(x_adv)
    q = F.softmax(logits_adv, dim=1)
    ce = F.cross_entropy(logits_adv, y, reduction="none")
    wrong = q.scatter(1, y.view(-1, 1), 0.0)
    top_wrong = wrong.max(dim=1).values
    boosted = ce - (1.0 - top_wrong).clamp_min(_PROB_FLOOR).log()

    p = F.softmax(model_fn(x), dim=1)
    p_true = p.gather(1, y.view(-1, 1)).squeeze(1)
    reg = kl_divergence(p, q) * (1.0 - p_true)
    return boosted.mean() + lambda_weight * reg.mean()


def loss_dkl(
    model_fn,
    x: Tensor,
    x_adv: Tensor,
    y: Tensor,
    beta: float = 6.0,
    w_mse: float = 1.0,
    w_ce: float = 1.0,
    stop_gradient: bool = True,
) -> Tensor:
    """Clean cross-entropy plus beta times the decoupled divergence."""
    logits_clean = model_fn(x)
    p = F.softmax(logits_clean, dim=1)
    q = F.softmax(model_fn(x_adv), dim=1)
    div = decoupled_divergence(p, q, w_mse=w_mse, w_ce=w_ce, stop_gradient=stop_gradient)
    return F.cross_entropy(logits_clean, y) + beta * div.mean()


def loss_score(model_fn, x: Tensor, x_adv: Tensor, y: Tensor, beta: float = 6.0) -> Tensor:
    """Clean cross-entropy plus beta times the l2 probability gap."""
    logits_clean = model_fn(x)
    p = F.softmax(logits_clean, dim=1)
    q = F.softmax(model_fn(x_adv), dim=1)
    gap = torch.linalg.vector_norm(p - q, ord=2, dim=-1)
    return F.cross_entropy(logits_clean, y) + beta * gap.mean()


VANILLA_AT = "vanilla_at"
TRADES = "trades"
MART = "mart"
DKL = "dkl"
SCORE = "score"

KNOWN_DEFENSES = (VANILLA_AT, TRADES, MART, DKL, SCORE)

# Which attack objective crafts each method's inner adversarial batch.
INNER_LOSS = {
    VANILLA_AT: "cross_entropy",
    TRADES: "kl_vs_clean",
    MART: "cross_entropy",
    DKL: "kl_vs_clean",
    SCORE: "kl_vs_clean",
}


@dataclass(frozen=True)
class DefenseSpec:
    """One defense method: its objective parameters and training attack."""

    method: str
    budget: AttackBudget
    inner_loss_kind: str = ""
    beta: float = 6.0
    lambda_weight: float = 5.0
    w_mse: float = 1.0
    w_ce: float = 1.0

    def __post_init__(self) -> None:
        if self.method not in KNOWN_DEFENSES:
            raise ConfigurationError(
                f"unknown defense {self.method!r}; known: {KNOWN_DEFENSES}"
            )
        if self.beta <= 0 or self.lambda_weight <= 0:
            raise ConfigurationError("beta and lambda_weight must be positive")
        if self.w_mse < 0 or self.w_ce < 0 or self.w_mse + self.w_ce == 0:
            raise ConfigurationError("divergence weights must be >= 0, not both zero")
        if not self.inner_loss_kind:
            object.__setattr__(self, "inner_loss_kind", INNER_LOSS[self.method])

    def loss(self, model_fn, x: Tensor, x_adv: Tensor, y: Tensor) -> Tensor:
        if self.method == VANILLA_AT:
            return loss_vanilla_at(model_fn, x_adv, y)
        if self.method == TRADES:
            return loss_trades(model_fn, x, x_adv, y, beta=self.beta)
        if self.method == MART:
            return loss_mart(model_fn, x, x_adv, y, lambda_weight=self.lambda_weight)
        if self.method == DKL:
            return loss_dkl(
                model_fn, x, x_adv, y, beta=self.beta, w_mse=self.w_mse, w_ce=self.w_ce
            )
        return loss_score(model_fn, x, x_adv, y, beta=self.beta)


@dataclass(frozen=True)
class DefenseBank:
    """Lookup from method id to its DefenseSpec."""

    specs: dict[str, DefenseSpec] = field(default_factory=dict)

    def get(self, method: str) -> DefenseSpec:
        if method not in self.specs:
            raise ConfigurationError(
                f"no defense registered for {method!r}; known: {list(self.specs)}"
            )
        return self.specs[method]


def default_defenses(
    budget: AttackBudget,
    methods: tuple[str, ...] = (VANILLA_AT, TRADES, MART, DKL),
    beta: float = 6.0,
    lambda_weight: float = 5.0,
    w_mse: float = 1.0,
    w_ce: float = 1.0,
) -> DefenseBank:
    """Standard bank with conventional hyperparameters for each method."""
    specs = {
        m: DefenseSpec(
            m,
            budget,
            beta=beta,
            lambda_weight=lambda_weight,
            w_mse=w_mse,
            w_ce=w_ce,
        )
        for m in methods
    }
    return DefenseBank(specs)
