"""On-disk formats: Field files and parameter checkpoints.

Field format: ``<name>.json`` holds the grid metadata
``{dims, resolution, length, periodic, channels, dtype: "f64le",
order: "row-major"}`` and ``<name>.f64`` holds the raw little-endian doubles,
channel-major then row-major spatial.

Checkpoint format: a single file starting with an 8-byte little-endian
length, a UTF-8 JSON index ``{"tensors": [{name, shape, dtype, offset,
nbytes}], ...extra}``, then the raw little-endian blobs concatenated in index
order.  Offsets are relative to the end of the JSON block.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .grids import Field, Grid

_F64 = np.dtype("<f8")
_C128 = np.dtype("<c16")


def save_field(path_base, f: Field) -> Path:
    base = Path(path_base)
    base.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "dims": f.grid.dims,
        "resolution": list(f.grid.resolution),
        "length": list(f.grid.length),
        "periodic": list(f.grid.periodic),
        "channels": f.channels,
        "dtype": "f64le",
        "order": "row-major",
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    base.with_suffix(".f64").write_bytes(
        np.ascontiguousarray(f.values, dtype=_F64).tobytes()
    )
    return base


def load_field(path_base) -> Field:
    base = Path(path_base)
    meta = json.loads(base.with_suffix(".json").read_text())
    if meta.get("dtype") != "f64le" or meta.get("order") != "row-major":
        raise ValueError(f"unsupported field encoding in {base}")
    grid = Grid(
        tuple(meta["resolution"]), tuple(meta["length"]), tuple(meta["periodic"])
    )
    raw = np.frombuffer(base.with_suffix(".f64").read_bytes(), dtype=_F64)
    shape = (meta["channels"],) + grid.resolution
    if raw.size != int(np.prod(shape)):
        raise ValueError(f"field blob size mismatch in {base}")
    return Field(grid, raw.reshape(shape).copy())


def save_tensors(path, tensors: dict[str, np.ndarray], extra: dict | None = None):
    """Write named arrays (f64 or c128) plus an extra JSON header to one file."""
    index = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        if np.iscomplexobj(arr):
            data = np.ascontiguousarray(arr, dtype=_C128).tobytes()
            dtype = "c128le"
        else:
            data = np.ascontiguousarray(arr, dtype=_F64).tobytes()
            dtype = "f64le"
        index.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    header = dict(extra or {})
    header["tensors"] = index
    payload = json.dumps(header).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back tensors and the extra header written by :func:`save_tensors`."""
    raw = Path(path).read_bytes()
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    base = 8 + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        dtype = _C128 if entry["dtype"] == "c128le" else _F64
        start = base + entry["offset"]
        arr = np.frombuffer(raw[start : start + entry["nbytes"]], dtype=dtype)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    extra = {k: v for k, v in header.items() if k != "tensors"}
    return tensors, extra
