"""Tagged little-endian containers of named float64 arrays (PMAP, PNET)."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np


def write_arrays(path, magic: bytes, kind: int, arrays: dict[str, np.ndarray], version: int = 1) -> None:
    with open(path, "wb") as fh:
        fh.write(magic + struct.pack("<III", version, kind, len(arrays)))
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())


def read_arrays(path, magic: bytes, version: int = 1) -> tuple[int, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise ValueError(f"{path}: expected magic {magic!r}")
    try:
        ver, kind, count = struct.unpack_from("<III", data, 4)
        if ver != version:
            raise ValueError(f"{path}: unsupported version {ver}")
        off = 16
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, off)
            name = data[off + 2:off + 2 + ln].decode()
            off += 2 + ln
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}Q", data, off + 4)
            off += 4 + 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            if off + 8 * size > len(data):
                raise ValueError(f"{path}: truncated array {name!r}")
            out[name] = np.frombuffer(data, "<f8", size, off).reshape(shape).copy()
            off += 8 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated file") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return kind, out
