"""Versioned binary container for named float32 tensors.

Layout::

    b"HYLMCKPT"                      8-byte magic
    u32 little-endian                format version
    u64 little-endian                header length in bytes
    header                           UTF-8 JSON, sorted keys; lists tensors
                                     as [name, shape] in storage order
    tensor blocks                    row-major little-endian float32, back to back

Round trips are bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"HYLMCKPT"
FORMAT_VERSION = 1


def dumps(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    head = dict(header)
    head["format_version"] = FORMAT_VERSION
    head["tensors"] = [[name, list(arr.shape)] for name, arr in tensors.items()]
    raw = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(raw)))
    buf.write(raw)
    for arr in tensors.values():
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != MAGIC:
        raise ConfigError("not a checkpoint container (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start : start + hlen].decode("utf-8"))
    offset = start + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(shape)
        tensors[name] = arr.astype(np.float32)
        offset += 4 * n
    if offset != len(blob):
        raise ConfigError("trailing bytes after last tensor block")
    return header, tensors


def save(path, header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blob = dumps(header, tensors)
    Path(path).write_bytes(blob)
    return blob


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
