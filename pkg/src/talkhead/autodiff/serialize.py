"""Named tensor records: name (u32 length + UTF-8), rank (u32), dims (u64 LE), values (f64 LE)."""
from __future__ import annotations

import struct
from typing import BinaryIO, Mapping

import numpy as np

from ..errors import FormatError


def read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(buf)}")
    return buf


def write_u32(fh: BinaryIO, v: int) -> None:
    fh.write(struct.pack("<I", v))


def read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", read_exact(fh, 4))[0]


def write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_str(fh: BinaryIO) -> str:
    n = read_u32(fh)
    return read_exact(fh, n).decode("utf-8")


def write_tensor(fh: BinaryIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype="<f8")
    write_str(fh, name)
    write_u32(fh, arr.ndim)
    if arr.ndim:
        fh.write(np.asarray(arr.shape, dtype="<u8").tobytes())
    fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensor(fh: BinaryIO) -> tuple[str, np.ndarray]:
    name = read_str(fh)
    rank = read_u32(fh)
    if rank > 16:
        raise FormatError(f"tensor {name!r}: implausible rank {rank}")
    dims = tuple(int(d) for d in np.frombuffer(read_exact(fh, 8 * rank), dtype="<u8")) if rank else ()
    count = int(np.prod(dims)) if dims else 1
    values = np.frombuffer(read_exact(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, values.reshape(dims)


def write_tensors(fh: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    write_u32(fh, len(tensors))
    for name, arr in tensors.items():
        write_tensor(fh, name, arr)


def read_tensors(fh: BinaryIO) -> dict[str, np.ndarray]:
    n = read_u32(fh)
    out = {}
    for _ in range(n):
        name, arr = read_tensor(fh)
        out[name] = arr
    return out
