"""Weight checkpoints.

Layout: ``MAGIC | u32 header length | JSON header | float32 LE arrays in
header order | u32 CRC-32 of everything before it``.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"H4VDMCK1"
FORMAT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict, meta: dict | None = None) -> Path:
    names = list(params)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": "<f4",
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "meta": meta or {},
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(params[n], dtype="<f4").tobytes() for n in names)
    blob = MAGIC + struct.pack("<I", len(head)) + head + body
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob + struct.pack("<I", zlib.crc32(blob) & 0xFFFFFFFF))
    return path


def read_header(path: str | Path) -> dict:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    return json.loads(data[len(MAGIC) + 4:len(MAGIC) + 4 + n])


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[dict, dict]:
    """Return ``(params, meta)``; verifies magic, sizes and the CRC trailer."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 8 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise CheckpointError(f"{path}: CRC-32 mismatch")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(data[start:start + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {header.get('format_version')}")
    pos = start + n
    params = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
        params[t["name"]] = arr.reshape(t["shape"]).astype(dtype)
        pos += 4 * count
    if pos != len(data) - 4:
        raise CheckpointError(f"{path}: {len(data) - 4 - pos} trailing bytes after tensors")
    return params, header["meta"]
