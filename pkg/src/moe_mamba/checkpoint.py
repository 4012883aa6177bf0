"""Single-file checkpoint format.

Line 1 is a JSON manifest (config, scalar training state, and a named-array
index with dtype, shape, and byte offset), terminated by a newline. The
payload that follows is the raw little-endian bytes of each array, in
manifest order; offsets are relative to the end of the header line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_checkpoint(
    path: str | Path,
    config: dict,
    state: dict,
    arrays: dict[str, np.ndarray],
) -> None:
    index = []
    offset = 0
    payload = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({
            "name": name,
            "dtype": arr.dtype.name,
            "shape": list(arr.shape),
            "offset": offset,
        })
        payload.append(raw)
        offset += len(raw)
    manifest = {"config": config, "state": state, "arrays": index}
    header = json.dumps(manifest, separators=(",", ":")) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("utf-8"))
        for raw in payload:
            f.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict, dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        header = f.readline()
        manifest = json.loads(header.decode("utf-8"))
        base = f.tell()
        arrays: dict[str, np.ndarray] = {}
        for entry in manifest["arrays"]:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            f.seek(base + entry["offset"])
            buf = f.read(count * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
            arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return manifest["config"], manifest["state"], arrays
