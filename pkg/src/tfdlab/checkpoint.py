"""Binary parameter files.

Layout::

    b"TFDCKPT1"                 8-byte magic
    uint32 little-endian        header length in bytes
    header                      UTF-8 JSON: kind, architecture, spec hash, extras
    float64 little-endian       flat parameter vector
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TFDCKPT1"


class CheckpointFormatError(IOError):
    pass


def write_checkpoint(path, flat: np.ndarray, header: dict) -> None:
    path = Path(path)
    flat = np.ascontiguousarray(flat, dtype="<f8")
    head = dict(header)
    head["num_values"] = int(flat.size)
    raw = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(flat.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path) -> tuple[np.ndarray, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:8]!r}")
    if len(blob) < 12:
        raise CheckpointFormatError(f"{path}: truncated header")
    (size,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12:12 + size].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header ({exc})") from None
    body = blob[12 + size:]
    if len(body) != 8 * header.get("num_values", -1):
        raise CheckpointFormatError(f"{path}: expected {header.get('num_values')} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").astype(np.float64), header
