"""Named-array checkpoints: a JSON manifest plus one raw float32 blob.

The manifest maps each array name to (shape, dtype, offset) inside the
little-endian binary32 blob; scalar metadata (step counter, config hash)
lives in the manifest's ``meta`` object. Serialization is canonical so
save -> load -> save is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

MANIFEST_FILE = "ckpt.json"
BLOB_FILE = "ckpt.bin"


class CheckpointError(Exception):
    pass


def config_hash(payload: dict) -> str:
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(directory: Path, arrays: dict[str, torch.Tensor | np.ndarray], meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = arrays[name]
        if isinstance(a, torch.Tensor):
            a = a.detach().cpu().numpy()
        a = np.ascontiguousarray(a, dtype="<f4")
        entries[name] = {"shape": list(a.shape), "dtype": "float32", "offset": offset}
        chunks.append(a.tobytes(order="C"))
        offset += len(chunks[-1])
    manifest = {"meta": meta, "arrays": entries, "blob_bytes": offset}
    (directory / MANIFEST_FILE).write_text(
        json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8"
    )
    (directory / BLOB_FILE).write_bytes(b"".join(chunks))


def load_checkpoint(directory: Path) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    mpath = directory / MANIFEST_FILE
    bpath = directory / BLOB_FILE
    if not mpath.exists() or not bpath.exists():
        raise CheckpointError(f"no checkpoint under {directory}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    blob = bpath.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"{bpath}: expected {manifest['blob_bytes']} bytes, found {len(blob)}"
        )
    arrays = {}
    for name, entry in manifest["arrays"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        arrays[name] = arr.reshape(shape).copy()
    return arrays, manifest["meta"]


def module_arrays(module: torch.nn.Module) -> dict[str, torch.Tensor]:
    """All learnable parameters plus persistent buffers (e.g. BN running stats)."""
    out = dict(module.named_parameters())
    for name, buf in module.named_buffers():
        if buf is not None and buf.dtype.is_floating_point:
            out[f"buf.{name}"] = buf
    return out


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.from_numpy(arrays[prefix + name]))
        for name, buf in module.named_buffers():
            key = f"{prefix}buf.{name}"
            if key in arrays:
                buf.copy_(torch.from_numpy(arrays[key]).to(buf.dtype))
