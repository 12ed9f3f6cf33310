"""Dataset ingestion and batching.

Three sources are supported: the classic big-endian binary image/label
archive pair (optionally gzipped), a directory of one folder per class
containing image files, and a built-in deterministic synthetic set of
noisy class-template blobs for desk-scale experiments where no real
dataset is available. All pixels are floats in [0, 1]; all orderings are
deterministic given a seed.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigurationError, IngestionError

IDX_IMAGES = "idx_images"
CLASS_FOLDERS = "directory_of_class_folders"
SYNTHETIC = "synthetic"
FORMATS = (IDX_IMAGES, CLASS_FOLDERS, SYNTHETIC)

_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm")


@dataclass
class LabeledImages:
    """A pixel batch in [0, 1] with integer labels."""

    images: Tensor  # (N, C, H, W) float32
    labels: Tensor  # (N,) int64

    def __post_init__(self) -> None:
        if self.images.dim() != 4:
            raise ConfigurationError(
                f"images must be (N, C, H, W), got {tuple(self.images.shape)}"
            )
        if self.labels.dim() != 1 or self.labels.shape[0] != self.images.shape[0]:
            raise ConfigurationError(
                f"labels shape {tuple(self.labels.shape)} does not match "
                f"{self.images.shape[0]} images"
            )
        if self.images.numel():
            lo, hi = self.images.min().item(), self.images.max().item()
            if lo < 0.0 or hi > 1.0:
                raise ConfigurationError(f"pixels must lie in [0, 1], got [{lo}, {hi}]")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, n: int) -> "LabeledImages":
        if n < 1:
            raise ConfigurationError(f"subset size must be >= 1, got {n}")
        n = min(n, len(self))
        return LabeledImages(self.images[:n], self.labels[:n])

    def shuffled(self, seed: int) -> "LabeledImages":
        g = torch.Generator().manual_seed(seed)
        order = torch.randperm(len(self), generator=g)
        return LabeledImages(self.images[order], self.labels[order])

    @property
    def num_classes(self) -> int:
        return int(self.labels.max().item()) + 1


def iter_batches(
    data: LabeledImages,
    batch_size: int,
    seed: int | None = None,
    drop_last: bool = False,
) -> Iterator[tuple[Tensor, Tensor]]:
    """Yield (images, labels) minibatches, shuffled when a seed is given."""
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    n = len(data)
    if seed is None:
        order = torch.arange(n)
    else:
        g = torch.Generator().manual_seed(seed)
        order = torch.randperm(n, generator=g)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if drop_last and idx.shape[0] < batch_size:
            return
        yield data.images[idx], data.labels[idx]


# -- binary archive pair (big-endian idx format) ------------------------

_MAGIC_IMAGES = 0x00000803
_MAGIC_LABELS = 0x00000801


def _read_binary(path: Path) -> bytes:
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from e
    if path.suffix == ".gz":
        try:
            return gzip.decompress(raw)
        except OSError as e:
            raise IngestionError(f"cannot decompress {path}: {e}") from e
    return raw


def _parse_idx(path: Path, expected_magic: int, ndims: int) -> np.ndarray:
    blob = _read_binary(path)
    header_len = 4 + 4 * ndims
    if len(blob) < header_len:
        raise IngestionError(f"{path}: truncated header ({len(blob)} bytes)")
    magic = struct.unpack(">I", blob[:4])[0]
    if magic != expected_magic:
        raise IngestionError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    dims = struct.unpack(f">{ndims}I", blob[4:header_len])
    count = int(np.prod(dims))
    body = blob[header_len:]
    if len(body) != count:
        raise IngestionError(
            f"{path}: header promises {count} bytes, file holds {len(body)}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx_pair(images_path: Path, labels_path: Path) -> LabeledImages:
    """Parse one image archive and its label archive."""
    imgs = _parse_idx(images_path, _MAGIC_IMAGES, 3)
    labels = _parse_idx(labels_path, _MAGIC_LABELS, 1)
    if imgs.shape[0] != labels.shape[0]:
        raise IngestionError(
            f"{images_path} holds {imgs.shape[0]} images but {labels_path} "
            f"holds {labels.shape[0]} labels"
        )
    images = torch.from_numpy(imgs.astype(np.float32) / 255.0).unsqueeze(1)
    return LabeledImages(images, torch.from_numpy(labels.astype(np.int64)))


def _find_idx_file(root: Path, stem: str) -> Path:
    for suffix in ("", ".gz"):
        p = root / (stem + suffix)
        if p.exists():
            return p
    raise IngestionError(f"no archive named {stem}[.gz] under {root}")


def load_idx_split(root: Path, split: str) -> LabeledImages:
    prefix = {"train": "train", "test": "t10k"}.get(split)
    if prefix is None:
        raise ConfigurationError(f"split must be 'train' or 'test', got {split!r}")
    images = _find_idx_file(root, f"{prefix}-images-idx3-ubyte")
    labels = _find_idx_file(root, f"{prefix}-labels-idx1-ubyte")
    return load_idx_pair(images, labels)


# -- directory of class folders -----------------------------------------


def load_class_folders(root: Path, image_size: int | None = None) -> LabeledImages:
    """Each immediate subdirectory is one class; file order is sorted."""
    try:
        from PIL import Image
    except ImportError as e:  # pragma: no cover
        raise IngestionError("Pillow is required for folder datasets") from e

    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise IngestionError(f"{root} contains no class folders")

    arrays, labels = [], []
    for label, cdir in enumerate(class_dirs):
        files = sorted(
            p for p in cdir.iterdir() if p.suffix.lower() in _IMAGE_EXTS
        )
        for f in files:
            try:
                with Image.open(f) as im:
                    if image_size is not None:
                        im = im.resize((image_size, image_size))
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as e:
                raise IngestionError(f"cannot decode image {f}: {e}") from e
            if arr.ndim == 2:
                arr = arr[None, :, :]
            else:
                arr = arr.transpose(2, 0, 1)
            arrays.append(arr)
            labels.append(label)
    if not arrays:
        raise IngestionError(f"{root} contains no readable images")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise IngestionError(f"inconsistent image shapes under {root}: {shapes}")
    images = torch.from_numpy(np.stack(arrays))
    return LabeledImages(images, torch.tensor(labels, dtype=torch.int64))


# -- synthetic blobs ------------------------------------------------------


def make_synthetic(
    n: int,
    image_size: int = 28,
    channels: int = 1,
    num_classes: int = 10,
    seed: int = 0,
    noise: float = 0.15,
) -> LabeledImages:
    """Deterministic noisy-template dataset.

    Each class is a fixed low-frequency template (a coarse random field
    upsampled to full resolution); samples are the template shifted by up
    to 2 pixels plus Gaussian pixel noise, clipped to [0, 1]. Classes are
    balanced and interleaved so any prefix subset stays balanced.
    """
    if n < 1 or num_classes < 2:
        raise ConfigurationError("need n >= 1 and num_classes >= 2")
    rng = np.random.default_rng(seed)
    coarse = max(4, image_size // 4)
    templates = []
    for _ in range(num_classes):
        field = rng.uniform(0.0, 1.0, size=(channels, coarse, coarse)).astype(np.float32)
        t = torch.nn.functional.interpolate(
            torch.from_numpy(field).unsqueeze(0),
            size=(image_size, image_size),
            mode="bilinear",
            align_corners=False,
        )[0].numpy()
        templates.append(t)

    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        c = i % num_classes
        dx, dy = rng.integers(-2, 3, size=2)
        rolled = np.roll(templates[c], (int(dx), int(dy)), axis=(1, 2))
        img = rolled + rng.normal(0.0, noise, size=rolled.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
        labels[i] = c
    return LabeledImages(torch.from_numpy(images), torch.from_numpy(labels))


def make_synthetic_splits(
    train_n: int,
    test_n: int,
    image_size: int = 28,
    channels: int = 1,
    num_classes: int = 10,
    seed: int = 0,
    noise: float = 0.15,
) -> tuple[LabeledImages, LabeledImages]:
    """Disjoint train/test draws from the same template family."""
    full = make_synthetic(
        train_n + test_n, image_size, channels, num_classes, seed=seed, noise=noise
    )
    # Interleaved labels keep both slices balanced.
    return (
        LabeledImages(full.images[:train_n], full.labels[:train_n]),
        LabeledImages(full.images[train_n:], full.labels[train_n:]),
    )


def load_dataset(
    path: str | Path | None,
    data_format: str,
    split: str = "train",
    image_size: int | None = None,
    synthetic_n: int = 10000,
    seed: int = 0,
) -> LabeledImages:
    """Dispatch to one ingestion backend; ordering is seed-deterministic."""
    if data_format == IDX_IMAGES:
        if path is None:
            raise ConfigurationError("idx_images requires a dataset path")
        return load_idx_split(Path(path), split)
    if data_format == CLASS_FOLDERS:
        if path is None:
            raise ConfigurationError("directory_of_class_folders requires a path")
        root = Path(path)
        split_dir = root / split
        return load_class_folders(split_dir if split_dir.is_dir() else root, image_size)
    if data_format == SYNTHETIC:
        train, test = make_synthetic_splits(
            synthetic_n,
            max(synthetic_n // 5, 1),
            image_size=image_size or 28,
            seed=seed,
        )
        return train if split == "train" else test
    raise ConfigurationError(f"unknown dataset format {data_format!r}; known: {FORMATS}")
