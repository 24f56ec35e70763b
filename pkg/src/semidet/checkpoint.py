"""Checkpoint container: JSON header + raw little-endian float32 arrays.

Layout: one line of compact JSON terminated by ``\\n``, followed by the
raw array bytes in header order. The header carries the ordered
parameter names, shapes, stored precision and endianness, plus an
arbitrary ``meta`` object (model config). Round-trips are bit-exact for
float32 sources.
"""
from __future__ import annotations

import json

import numpy as np


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


FORMAT_VERSION = 1


def save_checkpoint(path, named_arrays, meta: dict | None = None) -> None:
    """Write ``[(name, array), ...]`` to ``path``.

    Arrays are stored as little-endian float32 regardless of source
    dtype (float64 sources are narrowed; training runs in float32).
    """
    header = {
        "format_version": FORMAT_VERSION,
        "endianness": "little",
        "precision": "float32",
        "params": [[name, list(arr.shape)] for name, arr in named_arrays],
        "meta": meta if meta is not None else {},
    }
    blob = json.dumps(header, separators=(",", ":"), sort_keys=False)
    with open(path, "wb") as f:
        f.write(blob.encode("utf-8"))
        f.write(b"\n")
        for _, arr in named_arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``([(name, float32 array), ...], meta)``."""
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format_version {header.get('format_version')}"
        )
    if header.get("endianness") != "little" or header.get("precision") != "float32":
        raise CheckpointError(f"{path}: unsupported encoding {header}")
    body = raw[nl + 1 :]
    out = []
    offset = 0
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: truncated data for parameter {name!r}")
        arr = np.frombuffer(body[offset : offset + nbytes], dtype="<f4").reshape(shape)
        out.append((name, arr.copy()))
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: {len(body) - offset} trailing bytes")
    return out, header.get("meta", {})
