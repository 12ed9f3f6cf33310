"""Checkpoint persistence: a text manifest plus one raw binary blob.

A checkpoint is a directory holding `manifest.json` (format version, stage
tag, config hash, and per-array name/dtype/shape/offset/checksum) and
`data.bin` (the arrays' raw little-endian bytes, concatenated in manifest
order). Save then load is bitwise identical; any corruption is caught by
per-array checksums. The `config.json` written alongside makes a run
re-creatable from its artifacts alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import Tensor

from .errors import IntegrityError, StageError

FORMAT_VERSION = 1

STAGE_PRETRAINED = "pretrained"
STAGE_HYPERAT = "hyperat"
STAGE_MERGED = "merged"
STAGE_HYPERAT_PLUS = "hyperat_plus"
STAGES = (STAGE_PRETRAINED, STAGE_HYPERAT, STAGE_MERGED, STAGE_HYPERAT_PLUS)

MANIFEST_NAME = "manifest.json"
DATA_NAME = "data.bin"
CONFIG_NAME = "config.json"


@dataclass
class CheckpointBundle:
    """In-memory checkpoint: named arrays plus identifying metadata."""

    stage: str
    arrays: dict[str, np.ndarray]
    config_hash: str = ""
    meta: dict = field(default_factory=dict)

    def tensor(self, name: str) -> Tensor:
        if name not in self.arrays:
            raise IntegrityError(f"checkpoint has no array named {name!r}")
        return torch.from_numpy(self.arrays[name].copy())

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Arrays under `prefix/`, keyed by the remainder of the name."""
        plen = len(prefix) + 1
        return {
            name[plen:]: arr
            for name, arr in self.arrays.items()
            if name.startswith(prefix + "/")
        }


def require_stage(bundle: CheckpointBundle, allowed: tuple[str, ...], action: str) -> None:
    if bundle.stage not in allowed:
        raise StageError(
            f"{action} needs a checkpoint at stage {list(allowed)}, "
            f"got {bundle.stage!r}"
        )


def _to_little_endian(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    return arr


def _as_array(value) -> np.ndarray:
    if isinstance(value, Tensor):
        return _to_little_endian(value.detach().cpu().numpy())
    return _to_little_endian(np.asarray(value))


def save_checkpoint(
    path: str | Path,
    stage: str,
    arrays: Mapping[str, np.ndarray | Tensor],
    config_hash: str = "",
    meta: Mapping | None = None,
) -> Path:
    """Write a checkpoint directory; returns its path."""
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}; known: {STAGES}")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = _as_array(arrays[name])
        raw = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,  # e.g. "<f4"
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "sha256": hashlib.sha256(raw).hexdigest(),
            }
        )
        chunks.append(raw)
        offset += len(raw)

    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "config_hash": config_hash,
        "meta": dict(meta or {}),
        "arrays": entries,
    }
    (out / DATA_NAME).write_bytes(b"".join(chunks))
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_checkpoint(path: str | Path) -> CheckpointBundle:
    """Read and verify a checkpoint directory."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    data_path = root / DATA_NAME
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise IntegrityError(f"cannot read manifest at {manifest_path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(
            f"unsupported checkpoint format {manifest.get('format_version')!r}, "
            f"this build reads version {FORMAT_VERSION}"
        )
    stage = manifest.get("stage")
    if stage not in STAGES:
        raise IntegrityError(f"manifest declares unknown stage {stage!r}")
    try:
        blob = data_path.read_bytes()
    except OSError as e:
        raise IntegrityError(f"cannot read {data_path}: {e}") from e

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        start, n = entry["offset"], entry["nbytes"]
        raw = blob[start : start + n]
        if len(raw) != n:
            raise IntegrityError(
                f"array {entry['name']!r} truncated: wanted {n} bytes at offset "
                f"{start}, data file holds {len(blob)}"
            )
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise IntegrityError(f"checksum mismatch for array {entry['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return CheckpointBundle(
        stage=stage,
        arrays=arrays,
        config_hash=manifest.get("config_hash", ""),
        meta=manifest.get("meta", {}),
    )
