"""``CAMK`` parameter checkpoints.

Layout (all integers little-endian)::

    b"CAMK" | version u32 | count u32 |
    count x (name_len u16 | name utf-8 | dtype u8 | rank u8 | extents u32[rank] | payload)
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CAMK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {np.dtype(v).str: k for k, v in _DTYPES.items()}


class CheckpointFormatError(ValueError):
    pass


def _code(arr: np.ndarray) -> int:
    key = arr.dtype.newbyteorder("<").str if arr.dtype.byteorder not in ("|",) else arr.dtype.str
    if key not in _CODES:
        raise CheckpointFormatError(f"unsupported dtype {arr.dtype}")
    return _CODES[key]


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _code(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointFormatError(f"name too long: {name[:40]}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointFormatError("bad magic, not a CAMK checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + nlen].decode("utf-8")
            off += nlen
            code, rank = struct.unpack_from("<BB", buf, off)
            off += 2
            shape = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + n > len(buf):
                raise CheckpointFormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=off).reshape(shape).copy()
            off += n
    except (struct.error, KeyError) as exc:
        raise CheckpointFormatError(f"corrupt checkpoint: {exc}") from exc
    return out


def save(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
