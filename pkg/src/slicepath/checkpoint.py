"""Versioned checkpoint container: JSON header (config + array table) followed
by raw little-endian array payloads.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SPCKPT\x00\x01"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(Exception):
    """Checkpoint file is malformed or from an incompatible version."""


def save_checkpoint(path, arrays: dict, config: dict, meta: dict | None = None, dtype: str = "f32"):
    """Write named arrays with a config header.

    ``dtype`` selects the stored precision ("f32" per the container default;
    training state uses "f64" so interrupted runs resume exactly).
    """
    if dtype not in _DTYPES:
        raise CheckpointError(f"unsupported dtype {dtype!r}")
    np_dtype = _DTYPES[dtype]
    table = []
    payload = bytearray()
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype=np_dtype)
        table.append({"name": name, "dtype": dtype, "shape": list(data.shape)})
        payload += data.tobytes()
    header = json.dumps(
        {"version": VERSION, "config": config, "meta": meta or {}, "arrays": table}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> tuple[dict, dict, dict]:
    """Read (arrays, config, meta); arrays keep their stored dtype."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic")
    (header_len,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start : start + header_len])
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: corrupt header") from err
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {header.get('version')} != {VERSION}")
    offset = start + header_len
    arrays = {}
    for entry in header["arrays"]:
        np_dtype = _DTYPES.get(entry["dtype"])
        if np_dtype is None:
            raise CheckpointError(f"{path}: unknown dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * np.dtype(np_dtype).itemsize
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        arrays[entry["name"]] = (
            np.frombuffer(data[offset : offset + nbytes], dtype=np_dtype)
            .reshape(shape)
            .astype(np_dtype.lstrip("<"))
        )
        offset += nbytes
    return arrays, header["config"], header["meta"]
