"""Hypernetwork that emits low-rank adapter factors per (method, layer, position).

A context (defense method, encoder layer, injection position) is embedded by
three learned tables, projected through a small two-layer network to a
context code, and decoded by per-shape-class head matrices into the LoRA
factor pair (A, B). The additive weight update for a site is
``scale * B @ A`` with ``scale = alpha / rank``.

The embedding tables and projector are shared across every context; only the
decode heads are specific to a weight shape class, so methods share almost
all hypernetwork capacity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import torch
from torch import Tensor, nn

from .backbone import POSITIONS, InjectionSite, VisionBackbone
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class MethodRegistry:
    """Ordered collection of defense method names."""

    methods: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.methods) == 0:
            raise ConfigurationError("method registry must not be empty")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigurationError(f"duplicate method ids in {self.methods}")

    @property
    def count(self) -> int:
        return len(self.methods)

    def __len__(self) -> int:
        return len(self.methods)

    def __iter__(self):
        return iter(self.methods)

    def index(self, method: str) -> int:
        try:
            return self.methods.index(method)
        except ValueError:
            raise ConfigurationError(
                f"method {method!r} not registered; known: {list(self.methods)}"
            ) from None


DEFAULT_METHODS = ("vanilla_at", "trades", "mart", "dkl")


@dataclass(frozen=True)
class AdapterContext:
    """Conditioning triple for one adapter: which method, layer, position."""

    method: str
    layer_index: int
    position: str


@dataclass(frozen=True)
class LoraFactors:
    """One low-rank pair. The site's weight update is scale * b @ a."""

    a: Tensor  # (rank, in_dim)
    b: Tensor  # (out_dim, rank)
    scale: float

    def delta(self) -> Tensor:
        return self.scale * (self.b @ self.a)


class EmbeddingBank(nn.Module):
    """Method/layer/position embeddings plus the shared context projector."""

    def __init__(
        self,
        registry: MethodRegistry,
        num_layers: int,
        embed_dim: int = 32,
        context_dim: int = 64,
        seed: int = 0,
    ):
        super().__init__()
        if num_layers < 1:
            raise ConfigurationError(f"num_layers must be >= 1, got {num_layers}")
        if embed_dim < 1 or context_dim < 1:
            raise ConfigurationError("embed_dim and context_dim must be >= 1")
        self.registry = registry
        self.num_layers = num_layers
        self.embed_dim = embed_dim
        self.context_dim = context_dim

        self.method_embeddings = nn.Parameter(torch.empty(registry.count, embed_dim))
        self.layer_embeddings = nn.Parameter(torch.empty(num_layers, embed_dim))
        self.position_embeddings = nn.Parameter(torch.empty(len(POSITIONS), embed_dim))
        self.proj_in = nn.Linear(3 * embed_dim, context_dim)
        self.proj_out = nn.Linear(context_dim, context_dim)

        # Code-scale discipline: the decode heads see the code's norm twice,
        # once in the emitted factor and once in the gradient flowing back
        # into the head weights. Unit-variance embeddings feeding a standard
        # first affine keep gradients alive, while the output affine starts
        # a factor 1/sqrt(dim) smaller so code entries have rms ~ 1/sqrt(dim)
        # and the factor pathway moves at ordinary low-rank-adapter speed.
        g = torch.Generator().manual_seed(seed)
        for p in (
            self.method_embeddings,
            self.layer_embeddings,
            self.position_embeddings,
        ):
            p.data.normal_(0.0, 1.0, generator=g)
        for lin, shrink in ((self.proj_in, 1.0), (self.proj_out, context_dim**-0.5)):
            fan_in = lin.weight.shape[1]
            bound = (3.0 / fan_in) ** 0.5 * shrink
            lin.weight.data.uniform_(-bound, bound, generator=g)
            nn.init.zeros_(lin.bias)

    def _indices(self, ctx: AdapterContext) -> tuple[int, int, int]:
        m = self.registry.index(ctx.method)
        if not 0 <= ctx.layer_index < self.num_layers:
            raise ConfigurationError(
                f"layer index {ctx.layer_index} outside [0, {self.num_layers})"
            )
        try:
            p = POSITIONS.index(ctx.position)
        except ValueError:
            raise ConfigurationError(
                f"position {ctx.position!r} not one of {POSITIONS}"
            ) from None
        return m, ctx.layer_index, p

    def forward(self, ctx: AdapterContext) -> Tensor:
        """Context code for one (method, layer, position) triple."""
        m, l, p = self._indices(ctx)
        joint = torch.cat(
            [
                self.method_embeddings[m],
                self.layer_embeddings[l],
                self.position_embeddings[p],
            ]
        )
        return self.proj_out(torch.relu(self.proj_in(joint)))


def embed_context(bank: EmbeddingBank, ctx: AdapterContext) -> Tensor:
    return bank(ctx)


def _shape_key(out_dim: int, in_dim: int) -> str:
    return f"{out_dim}x{in_dim}"


class LoraHypernetwork(nn.Module):
    """Shared hypernetwork decoding context codes into LoRA factor pairs.

    One bias-free head matrix pair exists per distinct weight shape
    (out_dim, in_dim) among the injection sites. B-heads start at zero so
    every generated delta is zero before training.
    """

    def __init__(
        self,
        bank: EmbeddingBank,
        sites: Sequence[InjectionSite],
        rank: int = 16,
        alpha: float | None = None,
        seed: int = 0,
    ):
        super().__init__()
        if rank < 1:
            raise ConfigurationError(f"rank must be >= 1, got {rank}")
        if not sites:
            raise ConfigurationError("at least one injection site is required")
        self.bank = bank
        self.sites = tuple(sites)
        self.rank = rank
        self.alpha = float(alpha) if alpha is not None else float(rank)
        self.scale = self.alpha / rank

        shape_classes: dict[str, tuple[int, int]] = {}
        for site in self.sites:
            if rank > min(site.out_dim, site.in_dim):
                raise ConfigurationError(
                    f"rank {rank} exceeds min dimension of site {site.key} "
                    f"with shape ({site.out_dim}, {site.in_dim})"
                )
            shape_classes.setdefault(_shape_key(site.out_dim, site.in_dim), site.shape_class)
        self.shape_classes = dict(sorted(shape_classes.items()))

        nu = bank.context_dim
        g = torch.Generator().manual_seed(seed + 1)
        self.a_heads = nn.ParameterDict()
        self.b_heads = nn.ParameterDict()
        for key, (out_dim, in_dim) in self.shape_classes.items():
            a_head = torch.empty(rank * in_dim, nu)
            a_head.uniform_(-(nu**-0.5), nu**-0.5, generator=g)
            self.a_heads[key] = nn.Parameter(a_head)
            self.b_heads[key] = nn.Parameter(torch.zeros(out_dim * rank, nu))

    def decode(self, code: Tensor, site: InjectionSite) -> LoraFactors:
        """Map a context code to the factor pair for one site's shape."""
        key = _shape_key(site.out_dim, site.in_dim)
        if key not in self.a_heads:
            raise ConfigurationError(
                f"no head registered for shape class ({site.out_dim}, {site.in_dim})"
            )
        if code.shape != (self.bank.context_dim,):
            raise DimensionError(
                f"context code must have shape ({self.bank.context_dim},), "
                f"got {tuple(code.shape)}"
            )
        a = (self.a_heads[key] @ code).reshape(self.rank, site.in_dim)
        b = (self.b_heads[key] @ code).reshape(site.out_dim, self.rank)
        return LoraFactors(a=a, b=b, scale=self.scale)

    def generate(self, method: str, site: InjectionSite) -> LoraFactors:
        ctx = AdapterContext(method, site.layer_index, site.position)
        return self.decode(self.bank(ctx), site)

    def deltas_for_method(self, method: str) -> dict[InjectionSite, Tensor]:
        """Additive weight updates for every site, as a differentiable map."""
        return {site: self.generate(method, site).delta() for site in self.sites}

    def factors_for_method(self, method: str) -> dict[InjectionSite, LoraFactors]:
        return {site: self.generate(method, site) for site in self.sites}

    def expected_parameter_count(self) -> int:
        """Closed-form trainable size; must equal the live parameter total."""
        t = self.bank.embed_dim
        nu = self.bank.context_dim
        n = (self.bank.registry.count + self.bank.num_layers + len(POSITIONS)) * t
        n += (3 * t) * nu + nu  # projector in
        n += nu * nu + nu  # projector out
        for out_dim, in_dim in self.shape_classes.values():
            n += self.rank * in_dim * nu  # A head
            n += out_dim * self.rank * nu  # B head
        return n


def generate_lora(hn: LoraHypernetwork, code: Tensor, site: InjectionSite) -> LoraFactors:
    return hn.decode(code, site)


def generate_all(
    hn: LoraHypernetwork,
    registry: MethodRegistry | None = None,
    sites: Iterable[InjectionSite] | None = None,
) -> dict[tuple[str, InjectionSite], LoraFactors]:
    """Factor pairs for every (method, site) combination."""
    reg = registry if registry is not None else hn.bank.registry
    all_sites = tuple(sites) if sites is not None else hn.sites
    return {
        (method, site): hn.generate(method, site)
        for method in reg.methods
        for site in all_sites
    }


def build_hypernetwork(
    model: VisionBackbone,
    registry: MethodRegistry,
    rank: int = 16,
    alpha: float | None = None,
    embed_dim: int = 32,
    context_dim: int = 64,
    seed: int = 0,
) -> LoraHypernetwork:
    """Wire a hypernetwork to a backbone's injection sites."""
    bank = EmbeddingBank(
        registry,
        num_layers=model.spec.depth,
        embed_dim=embed_dim,
        context_dim=context_dim,
        seed=seed,
    )
    return LoraHypernetwork(bank, model.sites, rank=rank, alpha=alpha, seed=seed)


def materialize_deltas(
    factors: Mapping[InjectionSite, LoraFactors],
) -> dict[InjectionSite, Tensor]:
    """Detached delta matrices from a factor collection."""
    return {site: f.delta().detach().clone() for site, f in factors.items()}
