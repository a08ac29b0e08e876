"""Named-tensor archive files.

Layout (all integers u32 little-endian)::

    b"CLTA" | version | entry count
    per entry: name length | UTF-8 name | rank | extents... | float64 LE payload
"""
from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

MAGIC = b"CLTA"
VERSION = 1


class ArchiveError(ValueError):
    """File is not a valid tensor archive."""


def encode(entries: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = np.asarray(value, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    view = memoryview(buf)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ArchiveError(f"{source}: truncated archive (wanted {n} bytes at offset {pos})")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ArchiveError(f"{source}: bad magic, not a tensor archive")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ArchiveError(f"{source}: unsupported archive version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = bytes(take(nlen)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ArchiveError(f"{source}: entry name is not UTF-8") from exc
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        if name in out:
            raise ArchiveError(f"{source}: duplicate entry {name!r}")
        out[name] = data
    if pos != len(view):
        raise ArchiveError(f"{source}: {len(view) - pos} trailing bytes after last entry")
    return out


def save(path, entries: Mapping[str, np.ndarray]) -> None:
    path = os.fspath(path)
    try:
        with open(path, "wb") as fh:
            fh.write(encode(entries))
    except OSError as exc:
        raise OSError(f"cannot write archive {path}: {exc.strerror}") from exc


def load(path) -> dict[str, np.ndarray]:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read archive {path}: {exc.strerror}") from exc
    return decode(buf, source=path)
