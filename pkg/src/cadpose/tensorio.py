"""Binary tensor archive: named nd-arrays with per-record CRC32 checksums.

One format serves checkpoints, knowledge bases, feature files and dataset
maps. Layout (all integers little-endian):

    magic   b"CPTA"
    version u16
    count   u32
    record*count:
        name_len u16 | name utf-8
        dtype_len u8 | dtype ascii (numpy dtype str, or "json")
        ndim u8 | shape u64 * ndim
        nbytes u64 | payload | crc32 u32   (crc over payload only)

JSON records hold metadata (dicts/lists); array payloads are C-order
little-endian.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"CPTA"
VERSION = 1
META_KEY = "__meta__"


class ArchiveError(Exception):
    """Raised on malformed, truncated or corrupt archive files."""


def _encode_record(name: str, payload: bytes, dtype: str, shape: tuple[int, ...]) -> bytes:
    name_b = name.encode("utf-8")
    dtype_b = dtype.encode("ascii")
    head = struct.pack("<H", len(name_b)) + name_b
    head += struct.pack("<B", len(dtype_b)) + dtype_b
    head += struct.pack("<B", len(shape)) + b"".join(struct.pack("<Q", s) for s in shape)
    head += struct.pack("<Q", len(payload))
    return head + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def write_archive(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write arrays (insertion order preserved) plus an optional metadata dict."""
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    records = []
    for name, arr in arrays.items():
        if name == META_KEY:
            raise ArchiveError(f"record name {META_KEY!r} is reserved for metadata")
        a = np.ascontiguousarray(arr)
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        records.append(_encode_record(name, a.tobytes(), a.dtype.str, a.shape))
    if meta is not None:
        payload = json.dumps(meta, sort_keys=True).encode("utf-8")
        records.append(_encode_record(META_KEY, payload, "json", ()))
    chunks.append(struct.pack("<I", len(records)))
    chunks.extend(records)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ArchiveError("truncated archive")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        (val,) = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return val


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read an archive; returns (arrays, meta). CRC mismatch raises ArchiveError."""
    rd = _Reader(Path(path).read_bytes())
    if rd.take(4) != MAGIC:
        raise ArchiveError(f"{path}: not a tensor archive (bad magic)")
    version = rd.unpack("<H")
    if version != VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    count = rd.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, Any] = {}
    for _ in range(count):
        name = rd.take(rd.unpack("<H")).decode("utf-8")
        dtype = rd.take(rd.unpack("<B")).decode("ascii")
        ndim = rd.unpack("<B")
        shape = tuple(rd.unpack("<Q") for _ in range(ndim))
        nbytes = rd.unpack("<Q")
        payload = rd.take(nbytes)
        crc = rd.unpack("<I")
        if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
            raise ArchiveError(f"{path}: CRC mismatch in record {name!r}")
        if dtype == "json":
            meta_obj = json.loads(payload.decode("utf-8"))
            if name == META_KEY:
                meta = meta_obj
            else:
                arrays[name] = meta_obj  # type: ignore[assignment]
        else:
            arrays[name] = np.frombuffer(payload, dtype=np.dtype(dtype)).reshape(shape).copy()
    return arrays, meta
