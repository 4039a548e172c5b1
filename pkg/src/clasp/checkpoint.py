"""Single-file checkpoints: magic, manifest length, JSON manifest, raw float32 payloads.

The manifest lists every tensor's name, shape, dtype, byte offset and SHA-256,
together with the run config snapshot and the step counter.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from clasp.errors import ChecksumError, StructuralError

MAGIC = b"CLASPCK1"
DTYPE = "<f4"


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    config: dict
    step: int
    extra: dict = field(default_factory=dict)


def state_tensors(model: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> dict[str, torch.Tensor]:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            for key, val in st.items():
                tensors[f"optim/{names[id(p)]}/{key}"] = val
    return tensors


def save_checkpoint(path, tensors: dict[str, torch.Tensor], config: dict, step: int, extra: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        t = tensors[name].detach().cpu()
        if t.dtype != torch.float32:
            raise StructuralError(f"tensor {name!r} is {t.dtype}; checkpoints hold float32 only")
        raw = t.numpy().astype(DTYPE, copy=False).tobytes()
        entries.append({
            "name": name,
            "shape": list(t.shape),
            "dtype": DTYPE,
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": 1, "step": int(step), "config": config, "extra": extra or {}, "tensors": entries}
    manifest = json.dumps(manifest, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC + struct.pack("<Q", len(manifest)) + manifest)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint and verify every tensor checksum."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise StructuralError(f"{path}: not a checkpoint file")
    if len(data) < len(MAGIC) + 8:
        raise StructuralError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        manifest = json.loads(data[start:start + mlen])
    except (json.JSONDecodeError, UnicodeDecodeError, ValueError):
        raise StructuralError(f"{path}: corrupt manifest") from None
    if not isinstance(manifest, dict) or not {"step", "config", "tensors"} <= set(manifest):
        raise StructuralError(f"{path}: corrupt manifest")
    base = start + mlen
    tensors = {}
    for e in manifest["tensors"]:
        try:
            lo, n, name = base + int(e["offset"]), int(e["nbytes"]), e["name"]
        except (KeyError, TypeError, ValueError):
            raise StructuralError(f"{path}: corrupt manifest entry {e!r}") from None
        raw = data[lo:lo + n]
        if len(raw) != n:
            raise StructuralError(f"{path}: payload for {name!r} truncated")
        if hashlib.sha256(raw).hexdigest() != e.get("sha256"):
            raise ChecksumError(name)
        try:
            arr = np.frombuffer(raw, dtype=DTYPE).reshape(e["shape"])
        except (KeyError, TypeError, ValueError):
            raise StructuralError(f"{path}: tensor {name!r} does not match its declared shape") from None
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(tensors, manifest["config"], manifest["step"], manifest.get("extra", {}))


def check_compatible(tensors: dict[str, torch.Tensor], expected: dict[str, torch.Tensor], require_all: bool = True) -> None:
    """Raise StructuralError unless every expected tensor is present with the same shape."""
    for name, t in expected.items():
        if name not in tensors:
            if require_all:
                raise StructuralError(f"checkpoint is missing tensor {name!r}")
            continue
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise StructuralError(
                f"tensor {name!r} has shape {tuple(tensors[name].shape)}, model expects {tuple(t.shape)}"
            )
