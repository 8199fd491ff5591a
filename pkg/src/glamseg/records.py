"""Binary tensor record files shared by checkpoints and datasets.

Layout (all integers little-endian)::

    magic    8 bytes  b"GLAMCKPT"
    version  u32
    count    u32      number of records
    record*  name_len u32, name utf-8, dtype tag u8, rank u32,
             extents u64 * rank, raw little-endian values
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError

MAGIC = b"GLAMCKPT"
VERSION = 1

_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}


def _tag(arr: np.ndarray) -> int:
    for tag, ref in _TAGS.items():
        if ref.kind == arr.dtype.kind and ref.itemsize == arr.dtype.itemsize:
            return tag
    raise ContractError(f"unsupported dtype {arr.dtype} for record file")


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(raw)
    return b"".join(parts)


def decode(buf: bytes) -> dict[str, np.ndarray]:
    try:
        return _decode(buf)
    except (struct.error, UnicodeDecodeError) as exc:
        raise ContractError(f"corrupt record file: {exc}") from None


def _decode(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:8] != MAGIC:
        raise ContractError("not a GLAMCKPT record file (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ContractError(f"unsupported record file version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + nlen].decode("utf-8")
        off += nlen
        tag, rank = struct.unpack_from("<BI", buf, off)
        off += 5
        if tag not in _TAGS:
            raise ContractError(f"record {name!r}: unknown dtype tag {tag}")
        shape = struct.unpack_from(f"<{rank}Q", buf, off)
        off += 8 * rank
        dt = _TAGS[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if off + nbytes > len(buf):
            raise ContractError(f"record {name!r} truncated")
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
        off += nbytes
    return out


def save(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode(tensors))


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
