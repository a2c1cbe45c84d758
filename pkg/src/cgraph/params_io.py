"""Parameter snapshots.

Layout (all integers little-endian uint32):

    magic    8 bytes  b"CGRAPHP\\x00"
    version  uint32
    count    uint32
    count times:
        name_len uint32, name (utf-8), ndim uint32, dims uint32 * ndim,
        payload  float64 little-endian, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .model import ModelParams

MAGIC = b"CGRAPHP\x00"
VERSION = 1


class SnapshotError(ValueError):
    pass


def save_params(params: ModelParams, path: Path) -> None:
    named = params.named()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, t in named.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_snapshot(path: Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise SnapshotError(f"{path}: not a parameter snapshot")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise SnapshotError(f"{path}: snapshot version {version}, this build reads version {VERSION}")
    try:
        return _read_tensors(buf, count)
    except (struct.error, ValueError) as exc:
        raise SnapshotError(f"{path}: truncated or corrupt snapshot ({exc})") from exc


def _read_tensors(buf: bytes, count: int) -> dict[str, np.ndarray]:
    pos = 16
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(buf):
        raise ValueError(f"{len(buf) - pos} trailing bytes")
    return out


def load_params(params: ModelParams, path: Path) -> ModelParams:
    """Fill an initialised ``params`` in place from a snapshot."""
    stored = read_snapshot(path)
    named = params.named()
    missing = sorted(set(named) - set(stored))
    if missing:
        raise SnapshotError(f"{path}: snapshot lacks parameters {missing[:5]}")
    for name, t in named.items():
        if stored[name].shape != t.shape:
            raise SnapshotError(f"{path}: {name} has shape {stored[name].shape}, model expects {t.shape}")
        t.data = stored[name].astype(t.data.dtype)
    return params
