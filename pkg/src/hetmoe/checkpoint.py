"""Checkpoint container: a JSON header followed by named float64 arrays.

Layout of a checkpoint file::

    magic line   b"hetmoe-checkpoint-v1\\n"
    header line  JSON: {"format_version": 1, "config": {...}, "extra": {...},
                        "arrays": [{"name": str, "shape": [int, ...]}, ...]}
    payload      the arrays in header order, raw little-endian float64,
                 row-major, no padding

Raw float64 bytes round-trip bit-identically, so a reloaded model reproduces
forward outputs exactly.
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = b"hetmoe-checkpoint-v1\n"
FORMAT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray], config: dict,
                    extra: dict | None = None) -> None:
    names = list(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "extra": extra or {},
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in names:
            arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
            fh.write(arr.astype("<f8", copy=False).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic)")
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
        arrays = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated payload for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after declared arrays")
    return arrays, header["config"], header["extra"]
