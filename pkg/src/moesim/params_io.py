"""Flat binary container for named float32 tensors.

Layout: an 8-byte magic, a little-endian uint64 header length, a UTF-8 JSON
header, then the concatenated tensor payloads.  The header lists each
tensor's name, shape, byte offset (relative to the payload start) and byte
count; payloads are little-endian float32 in row-major order.  Tensors are
written sorted by name, so saving the same dict twice produces identical
bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MOESIMT1"


class ContainerError(ValueError):
    """Raised when a tensor container is malformed."""


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write a name -> float32 array mapping to ``path``."""
    entries = []
    payloads = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        if arr.dtype != np.float32:
            raise ContainerError(f"tensor {name!r} must be float32, got {arr.dtype}")
        raw = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        payloads.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in payloads:
            f.write(raw)


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container written by :func:`save_tensors`."""
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a tensor container")
    pos = len(MAGIC)
    (header_len,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    try:
        header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
        entries = header["tensors"]
    except (ValueError, KeyError) as exc:
        raise ContainerError(f"{path}: corrupt header ({exc})") from exc
    payload = blob[pos + header_len :]
    out: dict[str, np.ndarray] = {}
    for entry in entries:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if entry["nbytes"] != count * 4:
            raise ContainerError(f"{path}: size mismatch for tensor {entry['name']!r}")
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise ContainerError(f"{path}: truncated payload for tensor {entry['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").astype(np.float32).reshape(shape)
        out[entry["name"]] = arr
    return out
