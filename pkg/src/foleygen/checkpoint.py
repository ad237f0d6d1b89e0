"""Single-file checkpoints.

Layout::

    4s   magic b"VSCK"
    u32  format version
    u64  JSON index length
    ...  JSON index (utf-8): config echo, training state, tensor table
    ...  concatenated VSTF tensors; index offsets are relative to this region
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any

import numpy as np
import torch

from foleygen.data import decode_tensor, encode_tensor
from foleygen.errors import FormatError

MAGIC = b"VSCK"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")


def _to_storable(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().to(torch.float32).reshape(-1 if t.ndim == 0 else t.shape).numpy()


def save_checkpoint(path, tensors: dict[str, torch.Tensor], meta: dict[str, Any]) -> str:
    """Write ``tensors`` plus JSON-serializable ``meta``; returns the file's sha256."""
    blobs = []
    table = {}
    offset = 0
    for name, t in tensors.items():
        blob = encode_tensor(_to_storable(t))
        table[name] = {"offset": offset, "shape": list(t.shape), "dtype": str(t.dtype).replace("torch.", "")}
        blobs.append(blob)
        offset += len(blob)
    index = json.dumps({"format_version": FORMAT_VERSION, "meta": meta, "tensors": table},
                       sort_keys=True).encode()
    payload = PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(index)) + index + b"".join(blobs)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict[str, Any], str]:
    """Returns ``(tensors, meta, sha256)``; refuses unknown versions or corrupt files."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(buf) < PREAMBLE.size:
        raise FormatError("checkpoint truncated", 0)
    magic, version, index_len = PREAMBLE.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"not a checkpoint: magic {magic!r}, expected 'VSCK'", 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version} is not supported "
                          f"(this build reads version {FORMAT_VERSION})", 4)
    start = PREAMBLE.size
    try:
        index = json.loads(buf[start:start + index_len])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint index: {exc}", start) from exc
    base = start + index_len
    tensors = {}
    for name, entry in index["tensors"].items():
        array, _ = decode_tensor(buf, base + entry["offset"])
        t = torch.from_numpy(array.copy()).reshape(entry["shape"])
        tensors[name] = t.to(getattr(torch, entry["dtype"]))
    return tensors, index["meta"], hashlib.sha256(buf).hexdigest()


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def flatten_optimizer(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict[str, torch.Tensor], dict]:
    sd = opt.state_dict()
    tensors = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            tensors[f"{prefix}/{idx}/{key}"] = value if torch.is_tensor(value) else torch.tensor(value)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return tensors, {"param_groups": groups}


def restore_optimizer(prefix: str, opt: torch.optim.Optimizer, tensors: dict[str, torch.Tensor], meta: dict) -> None:
    state: dict[int, dict[str, torch.Tensor]] = {}
    for name, value in tensors.items():
        if not name.startswith(prefix + "/"):
            continue
        _, idx, key = name.split("/", 2)
        state.setdefault(int(idx), {})[key] = value
    groups = []
    for g in meta["param_groups"]:
        g = dict(g)
        if "betas" in g:
            g["betas"] = tuple(g["betas"])
        groups.append(g)
    opt.load_state_dict({"state": state, "param_groups": groups})
