"""Named-array container used for checkpoints.

Layout::

    u64 LE      header length in bytes
    header      UTF-8 JSON: {"meta": {...}, "arrays": {name: {dtype, shape, offset}}}
    payload     arrays back to back, little-endian, C order

``offset`` counts bytes from the start of the payload. ``dtype`` is ``f4``
or ``f8`` (``i8`` for integer bookkeeping arrays).
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "b1": "|b1"}


def _code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f4"
    if arr.dtype == np.float64:
        return "f8"
    if arr.dtype == np.bool_:
        return "b1"
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    raise TypeError(f"unsupported array dtype {arr.dtype}")


def save_arrays(path, arrays: dict, meta: dict) -> None:
    """Write ``arrays`` and JSON-serialisable ``meta`` atomically."""
    table, chunks, offset = {}, [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (n,) = struct.unpack("<Q", data[:8])
    if 8 + n > len(data):
        raise ValueError(f"{path}: header length {n} exceeds file size")
    header = json.loads(data[8:8 + n].decode("utf-8"))
    payload = memoryview(data)[8 + n:]
    arrays = {}
    for name, entry in header["arrays"].items():
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + count * dt.itemsize
        if end > len(payload):
            raise ValueError(f"{path}: array {name!r} runs past the payload")
        arr = np.frombuffer(payload[start:end], dtype=dt).reshape(entry["shape"])
        arrays[name] = arr.astype(dt.newbyteorder("="), copy=True)
    return arrays, header["meta"]
