"""Named-tensor archive used for checkpoints.

Binary layout (all integers little-endian)::

    magic      8 bytes   b"RMTLTNS1"
    count      uint32    number of tensors
    repeated count times:
        name_len   uint32
        name       name_len bytes, UTF-8
        ndim       uint32
        shape      ndim x uint64
        data       prod(shape) x float64, row-major

Tensors are written in sorted name order so identical parameter sets produce
identical files.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"RMTLTNS1"


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")  # ascontiguousarray would make 0-d arrays 1-d
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes(order="C"))
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("not a tensor archive (bad magic)")
    pos = 8

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(view):
            raise CheckpointError("truncated tensor archive")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    (count,) = read("<I")
    out = {}
    for _ in range(count):
        (name_len,) = read("<I")
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (ndim,) = read("<I")
        shape = read(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        if pos + 8 * n > len(view):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        out[name] = np.frombuffer(view, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(view):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path: Union[str, Path], tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path: Union[str, Path]) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
