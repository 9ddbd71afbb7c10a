"""Checkpoint directories: ``manifest.json`` + ``weights.bin`` (little-endian float32).

The manifest maps each tensor name to dtype, shape, byte offset and byte count
and carries a free-form metadata block (config snapshot, step, seed, ...).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np
import torch

MANIFEST = "manifest.json"
BLOB = "weights.bin"
FORMAT = "vlmir-checkpoint/1"
DTYPE = "<f4"


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class MissingTensorError(CheckpointError):
    pass


def save_checkpoint(tensors: dict[str, torch.Tensor], path: str | Path, metadata: dict | None = None) -> Path:
    """Write ``tensors`` to checkpoint directory ``path`` (created or overwritten)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = {}
    offset = 0
    tmp_blob = path / (BLOB + ".tmp")
    with open(tmp_blob, "wb") as fh:
        for name in sorted(tensors):
            arr = tensors[name].detach().to("cpu", torch.float32).contiguous().numpy().astype(DTYPE, copy=False)
            data = arr.tobytes(order="C")
            entries[name] = {"dtype": DTYPE, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
            fh.write(data)
            offset += len(data)
    manifest = {"format": FORMAT, "tensors": entries, "metadata": metadata or {}}
    tmp_manifest = path / (MANIFEST + ".tmp")
    tmp_manifest.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp_blob, path / BLOB)
    os.replace(tmp_manifest, path / MANIFEST)
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError:
        raise CheckpointError(f"no checkpoint manifest at {path / MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"unreadable manifest: {exc}") from None
    if manifest.get("format") != FORMAT or not isinstance(manifest.get("tensors"), dict):
        raise CorruptCheckpointError(f"{path} is not a {FORMAT} checkpoint")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Return ``(tensors, metadata)``, validating every manifest entry against the blob."""
    path = Path(path)
    manifest = read_manifest(path)
    try:
        blob = (path / BLOB).read_bytes()
    except FileNotFoundError:
        raise CorruptCheckpointError(f"missing {BLOB} in {path}") from None

    spans = []
    tensors = {}
    for name, entry in manifest["tensors"].items():
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset, nbytes = int(entry["offset"]), int(entry["nbytes"])
        except (KeyError, TypeError, ValueError):
            raise CorruptCheckpointError(f"malformed manifest entry for {name!r}") from None
        if entry.get("dtype") != DTYPE:
            raise CorruptCheckpointError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        if nbytes != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"{name}: {nbytes} bytes does not match shape {shape}")
        if offset < 0 or offset + nbytes > len(blob):
            raise CorruptCheckpointError(f"{name}: bytes [{offset}, {offset + nbytes}) exceed blob of {len(blob)}")
        spans.append((offset, offset + nbytes, name))
        arr = np.frombuffer(blob, dtype=DTYPE, count=nbytes // 4, offset=offset).reshape(shape)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise CorruptCheckpointError(f"tensors {a} and {b} overlap in the blob")
    return tensors, manifest.get("metadata", {})


def load_into(module: torch.nn.Module, tensors: dict[str, torch.Tensor], prefix: str = "") -> None:
    """Copy checkpoint tensors into ``module``; names must match exactly."""
    state = module.state_dict()
    names = {k[len(prefix):] for k in tensors if k.startswith(prefix)}
    unknown = sorted(names - set(state))
    missing = sorted(set(state) - names)
    if unknown or missing:
        raise MissingTensorError(
            f"checkpoint/model mismatch; unknown: {unknown[:5]}{'...' if len(unknown) > 5 else ''} "
            f"missing: {missing[:5]}{'...' if len(missing) > 5 else ''}"
        )
    for name, target in state.items():
        src = tensors[prefix + name]
        if tuple(src.shape) != tuple(target.shape):
            raise MissingTensorError(f"{name}: checkpoint shape {tuple(src.shape)} != model {tuple(target.shape)}")
    module.load_state_dict(
        {name: tensors[prefix + name].to(state[name].dtype) for name in state}, strict=True
    )


def module_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, torch.Tensor]:
    return {prefix + k: v for k, v in module.state_dict().items()}
