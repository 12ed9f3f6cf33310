"""Small vision transformer with declared low-rank injection sites.

The classifier is a standard pre-norm ViT: patch embedding, learned
positional embeddings, a class token, `depth` encoder blocks, and a linear
head on the class token. Three weight matrices per block are injection
sites that accept an additive delta at forward time: the fused QKV
projection and the two MLP linears. Everything else belongs to the frozen
base once the model enters tuning mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigurationError, DimensionError

ATTN_QKV = "attn_qkv"
MLP_FC1 = "mlp_fc1"
MLP_FC2 = "mlp_fc2"
POSITIONS = (ATTN_QKV, MLP_FC1, MLP_FC2)

TRAIN_NONE = "none"
TRAIN_HEAD = "head"
TRAIN_HEAD_AND_NORMS = "head_and_norms"


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture hyperparameters for the classifier."""

    image_size: int
    patch_size: int
    channels: int
    embed_dim: int
    depth: int
    heads: int
    mlp_ratio: int = 4
    num_classes: int = 10

    def validate(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0:
            raise ConfigurationError(
                f"image_size and patch_size must be positive, got "
                f"{self.image_size} and {self.patch_size}"
            )
        if self.image_size % self.patch_size != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size "
                f"{self.patch_size}"
            )
        if self.embed_dim % self.heads != 0:
            raise ConfigurationError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}"
            )
        if self.depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {self.depth}")
        if self.channels < 1 or self.num_classes < 2 or self.mlp_ratio < 1:
            raise ConfigurationError(
                "channels must be >= 1, num_classes >= 2, mlp_ratio >= 1"
            )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2


@dataclass(frozen=True)
class InjectionSite:
    """One adapter location: (layer, position) with its weight shape."""

    layer_index: int
    position: str
    in_dim: int
    out_dim: int

    @property
    def key(self) -> str:
        return f"{self.layer_index}.{self.position}"

    @property
    def shape_class(self) -> tuple[int, int]:
        return (self.out_dim, self.in_dim)


def sites_for_spec(spec: BackboneSpec) -> tuple[InjectionSite, ...]:
    """Enumerate all injection sites, ordered by (layer, position)."""
    d = spec.embed_dim
    hidden = spec.mlp_ratio * d
    sites = []
    for layer in range(spec.depth):
        sites.append(InjectionSite(layer, ATTN_QKV, d, 3 * d))
        sites.append(InjectionSite(layer, MLP_FC1, d, hidden))
        sites.append(InjectionSite(layer, MLP_FC2, hidden, d))
    return tuple(sites)


class DeltaLinear(nn.Module):
    """Linear layer whose weight accepts an optional additive delta per call.

    With delta absent (or zero) this is exactly `x @ weight.T + bias`; the
    delta never mutates the stored weight.
    """

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = nn.Parameter(torch.empty(out_dim, in_dim))
        self.bias = nn.Parameter(torch.zeros(out_dim))

    def forward(self, x: Tensor, delta: Optional[Tensor] = None) -> Tensor:
        if delta is None:
            return F.linear(x, self.weight, self.bias)
        if delta.shape != self.weight.shape:
            raise DimensionError(
                f"delta shape {tuple(delta.shape)} does not match weight shape "
                f"{tuple(self.weight.shape)}"
            )
        return F.linear(x, self.weight + delta, self.bias)


class EncoderBlock(nn.Module):
    """Pre-norm transformer block: attention then MLP, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = DeltaLinear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.fc1 = DeltaLinear(dim, mlp_ratio * dim)
        self.fc2 = DeltaLinear(mlp_ratio * dim, dim)

    def forward(
        self,
        x: Tensor,
        d_qkv: Optional[Tensor] = None,
        d_fc1: Optional[Tensor] = None,
        d_fc2: Optional[Tensor] = None,
    ) -> Tensor:
        b, n, d = x.shape
        h = self.ln1(x)
        qkv = self.qkv(h, d_qkv).reshape(b, n, 3, self.heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.softmax(dim=-1)
        out = (att @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(out)
        h = self.ln2(x)
        x = x + self.fc2(F.gelu(self.fc1(h, d_fc1)), d_fc2)
        return x


class VisionBackbone(nn.Module):
    """ViT classifier whose per-block QKV/MLP weights accept additive deltas.

    Parameters are initialized deterministically from `seed`; two models
    built from the same (spec, seed) are bitwise identical. After
    `freeze_pretrained` only the classification head and the normalization
    affines stay trainable; everything else is the frozen base.
    """

    def __init__(self, spec: BackboneSpec, seed: int = 0):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.sites = sites_for_spec(spec)
        self._site_lookup = {(s.layer_index, s.position): s for s in self.sites}

        d = spec.embed_dim
        self.patch_embed = nn.Conv2d(
            spec.channels, d, kernel_size=spec.patch_size, stride=spec.patch_size
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.zeros(1, spec.num_patches + 1, d))
        self.blocks = nn.ModuleList(
            EncoderBlock(d, spec.heads, spec.mlp_ratio) for _ in range(spec.depth)
        )
        self.final_norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, spec.num_classes)

        self._deterministic_init(seed)
        self.trainable_names: frozenset[str] = frozenset(
            name for name, _ in self.named_parameters()
        )

    def _deterministic_init(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            if p.dim() >= 2:
                nn.init.trunc_normal_(p, std=0.02, generator=g)
            elif name.endswith("bias"):
                nn.init.zeros_(p)
            else:  # LayerNorm weights
                nn.init.ones_(p)

    # -- trainability -------------------------------------------------

    def freeze_pretrained(self, trainable: str = TRAIN_HEAD_AND_NORMS) -> frozenset[str]:
        """Freeze the base; return the set of names left trainable."""
        if trainable not in (TRAIN_NONE, TRAIN_HEAD, TRAIN_HEAD_AND_NORMS):
            raise ConfigurationError(f"unknown trainable policy {trainable!r}")
        norm_prefixes = tuple(
            name
            for name, mod in self.named_modules()
            if isinstance(mod, nn.LayerNorm)
        )
        names = set()
        for name, p in self.named_parameters():
            keep = False
            if trainable in (TRAIN_HEAD, TRAIN_HEAD_AND_NORMS):
                keep = keep or name.startswith("head.")
            if trainable == TRAIN_HEAD_AND_NORMS:
                keep = keep or any(name.startswith(pref + ".") for pref in norm_prefixes)
            p.requires_grad_(keep)
            if keep:
                names.add(name)
        self.trainable_names = frozenset(names)
        return self.trainable_names

    def unfreeze_all(self) -> None:
        for p in self.parameters():
            p.requires_grad_(True)
        self.trainable_names = frozenset(n for n, _ in self.named_parameters())

    def is_trainable(self, name: str) -> bool:
        return name in self.trainable_names

    def frozen_state(self) -> dict[str, Tensor]:
        """Clones of every frozen parameter, for conservation checks."""
        return {
            name: p.detach().clone()
            for name, p in self.named_parameters()
            if name not in self.trainable_names
        }

    # -- forward ------------------------------------------------------

    def _check_images(self, images: Tensor) -> None:
        s = self.spec
        if images.dim() != 4 or tuple(images.shape[1:]) != (
            s.channels,
            s.image_size,
            s.image_size,
        ):
            raise DimensionError(
                f"expected images of shape (batch, {s.channels}, {s.image_size}, "
                f"{s.image_size}), got {tuple(images.shape)}"
            )

    def _layer_deltas(
        self, deltas: Optional[Mapping[InjectionSite, Tensor]], layer: int
    ) -> tuple[Optional[Tensor], Optional[Tensor], Optional[Tensor]]:
        if not deltas:
            return None, None, None
        return tuple(
            deltas.get(self._site_lookup[(layer, pos)]) for pos in POSITIONS
        )

    def forward(
        self,
        images: Tensor,
        deltas: Optional[Mapping[InjectionSite, Tensor]] = None,
    ) -> Tensor:
        self._check_images(images)
        if deltas:
            for site in deltas:
                if self._site_lookup.get((site.layer_index, site.position)) != site:
                    raise DimensionError(f"unknown injection site {site}")
        z = self.patch_embed(images).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(z.shape[0], -1, -1)
        z = torch.cat([cls, z], dim=1) + self.pos_embed
        for layer, block in enumerate(self.blocks):
            d_qkv, d_fc1, d_fc2 = self._layer_deltas(deltas, layer)
            z = block(z, d_qkv, d_fc1, d_fc2)
        return self.head(self.final_norm(z)[:, 0])


def init_backbone(spec: BackboneSpec, seed: int = 0) -> VisionBackbone:
    """Build a backbone and mark only head + norm affines trainable."""
    model = VisionBackbone(spec, seed)
    model.freeze_pretrained(TRAIN_HEAD_AND_NORMS)
    return model


def forward_logits(
    model: VisionBackbone,
    images: Tensor,
    deltas: Optional[Mapping[InjectionSite, Tensor]] = None,
) -> Tensor:
    return model(images, deltas)


def parameter_snapshot(module: nn.Module, names: Iterable[str] | None = None) -> dict[str, Tensor]:
    """Detached clones of parameters, keyed by name."""
    wanted = set(names) if names is not None else None
    return {
        name: p.detach().clone()
        for name, p in module.named_parameters()
        if wanted is None or name in wanted
    }
