"""Bit-exact checkpoint container.

Layout: magic bytes ``T4P1``, a 32-bit little-endian unsigned header
length, a JSON header listing records ``{name, shape, dtype: "f32"}`` in
order, then the concatenated raw little-endian float32 payloads.
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"T4P1"


class CheckpointError(Exception):
    pass


def save_checkpoint(path, named_arrays):
    """Write named arrays (in iteration order) as float32 records."""
    if isinstance(named_arrays, dict):
        named_arrays = list(named_arrays.items())
    records = []
    payloads = []
    for name, arr in named_arrays:
        data = np.asarray(getattr(arr, "data", arr), dtype="<f4")
        records.append({"name": name, "shape": list(data.shape), "dtype": "f32"})
        payloads.append(data.tobytes(order="C"))
    header = json.dumps(records).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for payload in payloads:
            fh.write(payload)


def load_checkpoint(path):
    """Read a checkpoint back as an ordered dict of float32 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes at offset 0: {blob[:4]!r}")
    if len(blob) < 8:
        raise CheckpointError(f"truncated header length field at offset 4 (file is {len(blob)} bytes)")
    (hlen,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + hlen:
        raise CheckpointError(f"truncated JSON header at offset 8 (need {hlen} bytes)")
    try:
        records = json.loads(blob[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed JSON header at offset 8: {exc}") from exc
    out = {}
    offset = 8 + hlen
    for rec in records:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if len(blob) < offset + nbytes:
            raise CheckpointError(
                f"truncated payload for record '{rec['name']}' at offset {offset} (need {nbytes} bytes)"
            )
        out[rec["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    return out
