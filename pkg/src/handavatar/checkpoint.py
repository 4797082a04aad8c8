"""Checkpoint file format: a JSON header (names, shapes, dtype, byte offsets)
followed by little-endian raw float64 payloads."""

from __future__ import annotations

import json
import struct

import numpy as np

_MAGIC = b"HAVCKPT1"


def save_checkpoint(path, arrays):
    """``arrays``: dict name -> ndarray. Written in sorted-name order so the
    file bytes are reproducible."""
    names = sorted(arrays)
    header = {"dtype": "<f8", "tensors": {}}
    offset = 0
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype=np.float64)
        header["tensors"][name] = {"shape": list(a.shape), "offset": offset}
        offset += a.nbytes
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for name in names:
            f.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()
    out = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = meta["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=start)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out
