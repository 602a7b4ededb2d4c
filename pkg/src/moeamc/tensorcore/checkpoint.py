"""Binary parameter checkpoints.

Layout (little-endian): magic ``MOEAMCPT``, u32 version, u32 manifest length,
UTF-8 JSON manifest mapping each name to shape, dtype and byte offset, the
concatenated float32 arrays, then a u32 CRC32 over everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"MOEAMCPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(arrays: Mapping[str, np.ndarray], path, extra: dict | None = None) -> None:
    manifest = {"tensors": {}, "extra": extra or {}}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f4")
        manifest["tensors"][name] = {"shape": list(a.shape), "dtype": "f32", "offset": offset}
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError("bad magic")
    if len(raw) < 20:
        raise CheckpointError("truncated checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    start = 16 + hlen
    if start > len(body):
        raise CheckpointError("truncated checkpoint")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch")
    manifest = json.loads(raw[16:start].decode("utf-8"))
    out = {}
    for name, meta in manifest["tensors"].items():
        n = int(np.prod(meta["shape"], dtype=np.int64))
        lo = start + meta["offset"]
        if lo + 4 * n > len(body):
            raise CheckpointError(f"truncated data for {name}")
        out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=lo).reshape(meta["shape"]).copy()
    return out, manifest["extra"]
