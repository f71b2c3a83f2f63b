"""Named-array checkpoint container.

Layout::

    b"CVCKPT01" | uint64 LE header length | UTF-8 JSON header | payload

The header lists every entry (name, shape, offset, nbytes, crc32) plus
free-form metadata (model config, step counter, RNG state, ...).  The payload
is the concatenation of little-endian float32 arrays.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from .errors import CheckpointError, ConfigMismatchError

MAGIC = b"CVCKPT01"


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def tensors(self, prefix: str = "") -> dict[str, torch.Tensor]:
        n = len(prefix)
        return {k[n:]: torch.from_numpy(v.copy()) for k, v in self.arrays.items() if k.startswith(prefix)}


def save_arrays(path, arrays: Mapping[str, np.ndarray | torch.Tensor], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(buf), "crc32": zlib.crc32(buf)})
        chunks.append(buf)
        offset += len(buf)
    names = [e["name"] for e in entries]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names")
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    tmp.replace(path)


def load_arrays(path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0")
    if len(data) < 16:
        raise CheckpointError(f"{path}: truncated at offset {len(data)} (header length missing)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise CheckpointError(f"{path}: header needs bytes up to offset {16 + hlen}, file ends at {len(data)}")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header at offset 16: {exc}") from exc
    base = 16 + hlen
    arrays = {}
    for e in header["entries"]:
        start = base + e["offset"]
        end = start + e["nbytes"]
        if end > len(data):
            raise CheckpointError(
                f"{path}: entry {e['name']!r} spans offsets {start}-{end}, file ends at {len(data)}")
        buf = data[start:end]
        if zlib.crc32(buf) != e["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch in entry {e['name']!r} at offset {start}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    expected = base + sum(e["nbytes"] for e in header["entries"])
    if expected != len(data):
        raise CheckpointError(f"{path}: {len(data) - expected} trailing bytes after offset {expected}")
    return Checkpoint(arrays, header["meta"])


def check_config(found: dict, expected: dict, what: str = "model") -> None:
    if found != expected:
        diff = {k: (found.get(k), expected.get(k)) for k in set(found) | set(expected)
                if found.get(k) != expected.get(k)}
        raise ConfigMismatchError(f"{what} config mismatch (found, expected): {diff}")


def optimizer_arrays(optimizer: torch.optim.Optimizer, names: dict) -> dict[str, torch.Tensor]:
    """Flatten per-parameter optimizer state as ``optim/<param>/<key>``."""
    out = {}
    for p, st in optimizer.state.items():
        for key, val in st.items():
            out[f"optim/{names[p]}/{key}"] = torch.as_tensor(val, dtype=torch.float32)
    return out


def restore_optimizer(optimizer: torch.optim.Optimizer, named_params: dict, ckpt: Checkpoint) -> None:
    for name, p in named_params.items():
        prefix = f"optim/{name}/"
        state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in ckpt.arrays.items()
                 if k.startswith(prefix)}
        if state:
            optimizer.state[p] = state
