"""Flat binary checkpoint format.

Layout: magic ``SNB1``, version u32, then one record per array:
name length (u32), utf-8 name bytes, rank (u32), dims (u32 each),
little-endian float64 payload.  Records run until end of file.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SNB1"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        while True:
            head = f.read(4)
            if not head:
                break
            (name_len,) = struct.unpack("<I", head)
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = f.read(8 * count)
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    return out


def save_sidecar(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_sidecar(path) -> dict:
    return json.loads(Path(path).read_text())
