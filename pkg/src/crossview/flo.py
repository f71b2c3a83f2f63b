"""Middlebury ``.flo`` reader/writer (little-endian float32, interleaved u/v)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FlowFileError

FLO_MAGIC = 202021.25


def write_flo(path, u: np.ndarray, v: np.ndarray) -> None:
    u = np.asarray(u, dtype="<f4")
    v = np.asarray(v, dtype="<f4")
    if u.shape != v.shape or u.ndim != 2:
        raise FlowFileError(f"u/v must be equal 2-D grids, got {u.shape} and {v.shape}")
    h, w = u.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(np.array([FLO_MAGIC], dtype="<f4").tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(np.stack([u, v], axis=-1).astype("<f4").tobytes())


def read_flo(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(u, v)`` as float32 ``(H, W)`` arrays."""
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FlowFileError(f"{path}: truncated header ({len(data)} bytes)")
    magic = np.frombuffer(data, dtype="<f4", count=1)[0]
    if magic != np.float32(FLO_MAGIC):
        raise FlowFileError(f"{path}: bad magic {magic!r}, expected {FLO_MAGIC}")
    w, h = (int(x) for x in np.frombuffer(data, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FlowFileError(f"{path}: invalid size {w}x{h}")
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise FlowFileError(f"{path}: expected {expected} bytes, found {len(data)}")
    uv = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return uv[..., 0].astype(np.float32), uv[..., 1].astype(np.float32)
