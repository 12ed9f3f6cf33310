"""Gradient-based adversarial example generation under an l-infinity budget.

Implements sign-gradient PGD with random starts and restarts, the one-step
FGSM special case, and the logit-margin objective used by the CW-style
attack. All attacks keep the perturbed batch inside the epsilon ball around
the input and inside the [0, 1] pixel range, and are deterministic for a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, NumericalError

LOSS_KINDS = ("cross_entropy", "kl_vs_clean", "cw_margin")

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class AttackBudget:
    """l-infinity attack budget in pixel units."""

    epsilon: float
    step_size: float
    iterations: int = 10
    restarts: int = 1
    random_start: bool = True
    norm: str = "l_inf"

    def __post_init__(self) -> None:
        if self.norm != "l_inf":
            raise ConfigurationError(f"unsupported norm {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.epsilon > 0 and not 0 < self.step_size <= self.epsilon:
            raise ConfigurationError(
                f"step_size must satisfy 0 < step <= epsilon, got step "
                f"{self.step_size} for epsilon {self.epsilon}"
            )
        if self.iterations < 1 or self.restarts < 1:
            raise ConfigurationError("iterations and restarts must be >= 1")


# Shorthand builders for the two desk-scale input regimes.
def budget_rgb32(iterations: int = 10, restarts: int = 1) -> AttackBudget:
    """8/255 ball with 2/255 steps, the 32x32 RGB regime."""
    return AttackBudget(8 / 255, 2 / 255, iterations=iterations, restarts=restarts)


def budget_gray28(iterations: int = 10, restarts: int = 1) -> AttackBudget:
    """0.1 ball with 0.02 steps, the 28x28 grayscale regime."""
    return AttackBudget(0.1, 0.02, iterations=iterations, restarts=restarts)


@dataclass(frozen=True)
class AdvBatch:
    """Attacked pixel batch plus its perturbation.

    The perturbation is the primary quantity: it is projected exactly onto
    the epsilon ball and the pixel-range-feasible box, and x_adv is x plus
    it. Recovering the perturbation by subtracting pixels would reintroduce
    float rounding above epsilon.
    """

    x_adv: Tensor
    delta: Tensor

    def check(self, budget: AttackBudget) -> None:
        if self.delta.abs().max().item() > budget.epsilon + 1e-9:
            raise NumericalError("perturbation escaped the epsilon ball")
        if self.x_adv.min().item() < 0 or self.x_adv.max().item() > 1:
            raise NumericalError("attacked pixels escaped [0, 1]")


def cw_margin_loss(logits: Tensor, y: Tensor) -> Tensor:
    """Per-example margin: highest wrong-class logit minus true-class logit.

    Positive iff the example is misclassified; ascending it pushes the model
    toward the nearest wrong class.
    """
    if logits.dim() != 2 or logits.shape[1] < 2:
        raise ConfigurationError(
            f"margin loss needs (batch, classes>=2) logits, got {tuple(logits.shape)}"
        )
    true = logits.gather(1, y.view(-1, 1)).squeeze(1)
    masked = logits.scatter(1, y.view(-1, 1), float("-inf"))
    top_other = masked.max(dim=1).values
    return top_other - true


def _per_example_loss(
    loss_kind: str, logits: Tensor, y: Tensor, clean_probs: Tensor | None
) -> Tensor:
    if loss_kind == "cross_entropy":
        return F.cross_entropy(logits, y, reduction="none")
    if loss_kind == "kl_vs_clean":
        assert clean_probs is not None
        q = F.softmax(logits, dim=1).clamp_min(_PROB_FLOOR)
        p = clean_probs.clamp_min(_PROB_FLOOR)
        return (p * (p.log() - q.log())).sum(dim=1)
    if loss_kind == "cw_margin":
        return cw_margin_loss(logits, y)
    raise ConfigurationError(f"unknown attack loss {loss_kind!r}; known: {LOSS_KINDS}")


def _assert_finite_grad(grad: Tensor) -> None:
    finite = torch.isfinite(grad.flatten(1)).all(dim=1)
    if not bool(finite.all()):
        bad = torch.nonzero(~finite).flatten().tolist()
        raise NumericalError(f"non-finite attack gradient at batch indices {bad}")


def pgd_attack(
    model_fn,
    x: Tensor,
    y: Tensor,
    budget: AttackBudget,
    loss_kind: str = "cross_entropy",
    seed: int = 0,
) -> AdvBatch:
    """Iterated sign-gradient ascent inside the epsilon ball.

    Runs `budget.restarts` independent trajectories and keeps, per example,
    the perturbation with the highest final loss. `model_fn` maps a pixel
    batch to logits and must be differentiable with respect to its input.
    """
    if loss_kind not in LOSS_KINDS:
        raise ConfigurationError(f"unknown attack loss {loss_kind!r}; known: {LOSS_KINDS}")
    if x.dim() < 2 or x.shape[0] != y.shape[0]:
        raise ConfigurationError(
            f"inputs {tuple(x.shape)} and labels {tuple(y.shape)} disagree on batch size"
        )
    x = x.detach()
    if budget.epsilon == 0:
        return AdvBatch(x_adv=x.clone(), delta=torch.zeros_like(x))

    gen = torch.Generator().manual_seed(seed)
    clean_probs = None
    if loss_kind == "kl_vs_clean":
        with torch.no_grad():
            clean_probs = F.softmax(model_fn(x), dim=1)

    # Largest value of x's dtype not above epsilon: clamping to the naive
    # cast can overshoot the real ball when the cast rounds upward.
    eps = torch.tensor(budget.epsilon, dtype=x.dtype)
    if float(eps) > budget.epsilon:
        eps = torch.nextafter(eps, torch.zeros((), dtype=x.dtype))
    eps = float(eps)

    def project(delta: Tensor) -> Tensor:
        # Ball projection first, then the pixel-feasibility box in delta
        # space; where the box binds, -x and 1-x are exact floats, so the
        # ball bound survives bit for bit.
        delta = delta.clamp(-eps, eps)
        delta = torch.maximum(delta, -x)
        return torch.minimum(delta, 1.0 - x)

    best_loss = torch.full((x.shape[0],), float("-inf"), dtype=x.dtype)
    best_delta = torch.zeros_like(x)

    for _ in range(budget.restarts):
        if budget.random_start:
            delta = torch.empty_like(x).uniform_(-eps, eps, generator=gen)
            delta = project(delta)
        else:
            delta = torch.zeros_like(x)

        for _ in range(budget.iterations):
            x_adv = (x + delta).detach().requires_grad_(True)
            loss = _per_example_loss(loss_kind, model_fn(x_adv), y, clean_probs)
            (grad,) = torch.autograd.grad(loss.sum(), x_adv)
            _assert_finite_grad(grad)
            with torch.no_grad():
                delta = project(delta + budget.step_size * grad.sign())

        with torch.no_grad():
            final = _per_example_loss(loss_kind, model_fn(x + delta), y, clean_probs)
            better = final > best_loss
            best_loss = torch.where(better, final, best_loss)
            best_delta = torch.where(
                better.view(-1, *([1] * (x.dim() - 1))), delta, best_delta
            )

    x_adv = (x + best_delta).clamp(0.0, 1.0)
    return AdvBatch(x_adv=x_adv, delta=best_delta)


def fgsm_attack(
    model_fn,
    x: Tensor,
    y: Tensor,
    epsilon: float,
    loss_kind: str = "cross_entropy",
) -> AdvBatch:
    """Single full-step sign-gradient attack without random start."""
    if epsilon == 0:
        x = x.detach()
        return AdvBatch(x_adv=x.clone(), delta=torch.zeros_like(x))
    budget = AttackBudget(
        epsilon, epsilon, iterations=1, restarts=1, random_start=False
    )
    return pgd_attack(model_fn, x, y, budget, loss_kind=loss_kind, seed=0)


def eval_budget(train_budget: AttackBudget, iterations: int = 20, restarts: int = 2) -> AttackBudget:
    """Evaluation-strength variant of a training budget."""
    return replace(train_budget, iterations=iterations, restarts=restarts)
