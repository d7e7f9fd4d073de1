"""Single-file checkpoint container.

Layout: 4-byte magic, uint32 little-endian manifest length, UTF-8 JSON
manifest, then every array's raw little-endian bytes concatenated in manifest
order. The manifest records array names/shapes/dtypes plus config, seed,
stage, and the PEFT descriptor, so a checkpoint is self-describing.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError

MAGIC = b"PTMC"
VERSION = 1


@dataclass
class CheckpointState:
    arrays: dict[str, np.ndarray]
    config: dict = field(default_factory=dict)
    seed: int = 0
    stage: str = ""
    peft: dict = field(default_factory=dict)


def module_arrays(module: nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    """Detach every parameter into a name -> array mapping."""
    lead = f"{prefix}." if prefix else ""
    return {
        f"{lead}{name}": param.detach().cpu().numpy().copy()
        for name, param in module.named_parameters()
    }


def save_checkpoint(state: CheckpointState, path: str | Path) -> Path:
    manifest = {
        "version": VERSION,
        "config": state.config,
        "seed": state.seed,
        "stage": state.stage,
        "peft": state.peft,
        "arrays": [
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": np.dtype(arr.dtype).newbyteorder("<").str,
            }
            for name, arr in state.arrays.items()
        ],
    }
    blob = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in state.arrays.values():
            fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return path


def load_checkpoint(path: str | Path) -> CheckpointState:
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint container")
    (manifest_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + manifest_len:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(raw[8 : 8 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest: {exc}") from None

    payload = raw[8 + manifest_len :]
    expected = sum(
        int(np.prod(entry["shape"], dtype=np.int64)) * np.dtype(entry["dtype"]).itemsize
        for entry in manifest["arrays"]
    )
    if len(payload) != expected:
        raise CheckpointError(
            f"{path}: payload holds {len(payload)} bytes, manifest expects {expected}"
        )

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in manifest["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dtype.itemsize
        arrays[entry["name"]] = (
            np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
            .reshape(entry["shape"])
            .copy()
        )
        offset += nbytes
    return CheckpointState(
        arrays=arrays,
        config=manifest.get("config", {}),
        seed=manifest.get("seed", 0),
        stage=manifest.get("stage", ""),
        peft=manifest.get("peft", {}),
    )


def load_into_module(state: CheckpointState, module: nn.Module, prefix: str = "") -> None:
    """Copy checkpoint arrays into matching parameters; shapes must agree."""
    lead = f"{prefix}." if prefix else ""
    params = dict(module.named_parameters())
    with torch.no_grad():
        for name, param in params.items():
            key = f"{lead}{name}"
            if key not in state.arrays:
                raise CheckpointError(f"checkpoint is missing array {key!r}")
            arr = state.arrays[key]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"array {key!r} has shape {tuple(arr.shape)}, "
                    f"parameter expects {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr.copy()))
