"""Binary checkpoint files: versioned header, then named float64 arrays.

Layout: 8-byte magic, u32 format version, u64 JSON length + canonical JSON
metadata, u32 array count, then per array: u16 name length + name, u8 ndim,
u64 dims, row-major little-endian float64 payload. Arrays are written in
sorted name order and the JSON is dumped with sorted keys, so identical
state produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointFormatError

MAGIC = b"PMIXCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray] = field(repr=False)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    blob = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(ckpt.arrays)))
        for name in sorted(ckpt.arrays):
            data = np.ascontiguousarray(ckpt.arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            fh.write(data.tobytes())


def _read_exactly(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        if _read_exactly(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointFormatError("not a promptmix checkpoint")
        (version,) = struct.unpack("<I", _read_exactly(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}, expected {FORMAT_VERSION}")
        (json_len,) = struct.unpack("<Q", _read_exactly(fh, 8, "header length"))
        try:
            meta = json.loads(_read_exactly(fh, json_len, "header"))
        except json.JSONDecodeError as exc:
            raise CheckpointFormatError(f"malformed checkpoint header: {exc}") from exc
        (count,) = struct.unpack("<I", _read_exactly(fh, 4, "array count"))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exactly(fh, 2, "array name length"))
            name = _read_exactly(fh, name_len, "array name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exactly(fh, 1, "array rank"))
            shape = struct.unpack(f"<{ndim}Q", _read_exactly(fh, 8 * ndim, "array shape")) if ndim else ()
            n_items = int(np.prod(shape)) if shape else 1
            payload = _read_exactly(fh, 8 * n_items, f"array {name!r}")
            arrays[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return Checkpoint(meta=meta, arrays=arrays)
