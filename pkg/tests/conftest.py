"""Shared fixtures and the finite-difference gradient oracle."""

from __future__ import annotations

import pytest
import torch

from hyperlora.backbone import BackboneSpec, VisionBackbone
from hyperlora.data import make_synthetic_splits
from hyperlora.hypernet import MethodRegistry, build_hypernetwork


@pytest.fixture
def tiny_spec() -> BackboneSpec:
    """One-layer, d=8 backbone for gradient checks and fast unit tests."""
    return BackboneSpec(
        image_size=8, patch_size=4, channels=1, embed_dim=8, depth=1, heads=2,
        num_classes=4,
    )


@pytest.fixture
def small_spec() -> BackboneSpec:
    """Two-layer backbone large enough to exercise multi-layer paths."""
    return BackboneSpec(
        image_size=16, patch_size=4, channels=1, embed_dim=32, depth=2, heads=4
    )


@pytest.fixture
def tiny_model(tiny_spec) -> VisionBackbone:
    return VisionBackbone(tiny_spec, seed=0)


@pytest.fixture
def small_model(small_spec) -> VisionBackbone:
    return VisionBackbone(small_spec, seed=0)


@pytest.fixture
def registry4() -> MethodRegistry:
    return MethodRegistry(("vanilla_at", "trades", "mart", "dkl"))


@pytest.fixture
def small_hypernet(small_model, registry4):
    return build_hypernetwork(small_model, registry4, rank=4, seed=0)


@pytest.fixture
def toy_batch():
    g = torch.Generator().manual_seed(7)
    x = torch.rand(12, 1, 16, 16, generator=g)
    y = torch.randint(0, 10, (12,), generator=g)
    return x, y


@pytest.fixture
def blob_data():
    return make_synthetic_splits(256, 64, image_size=16, seed=3, noise=0.08)


def central_difference_grad(f, x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """Independent gradient oracle: two-sided finite differences per element.

    `f` maps a tensor to a scalar; `x` should be float64 for headroom.
    """
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = float(f(x).detach())
        flat[i] = orig - eps
        lo = float(f(x).detach())
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_grad_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Vector-norm relative error between gradient estimates."""
    diff = (analytic - numeric).norm().item()
    scale = max(analytic.norm().item(), numeric.norm().item(), 1e-12)
    return diff / scale
