"""Versioned little-endian tensor archive.

Layout::

    magic          4 bytes
    version        u32
    fingerprint    32 bytes (sha256 of whatever the writer chooses to pin)
    meta length    u32, followed by UTF-8 JSON with sorted keys
    tensor count   u32
    per tensor     u16 name length, name, u8 dtype code, u8 ndim,
                   u32 dims[ndim], raw little-endian data
    crc32          u32 over every preceding byte

No timestamps or platform-dependent fields are written, so identical inputs
give byte-identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT_VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
}
_CODES = {(dt.kind, dt.itemsize): code for code, dt in _DTYPES.items()}


class ArchiveError(DataError):
    pass


def fingerprint(obj) -> bytes:
    """sha256 of the canonical JSON encoding of ``obj``."""
    return hashlib.sha256(canonical_json(obj).encode()).digest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def write_archive(path, magic: bytes, tensors: dict, meta=None, fp: bytes = b"\0" * 32):
    if len(magic) != 4 or len(fp) != 32:
        raise ValueError("magic must be 4 bytes and fingerprint 32 bytes")
    buf = io.BytesIO()
    buf.write(magic)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    buf.write(fp)
    meta_bytes = canonical_json(meta or {}).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get((arr.dtype.kind, arr.dtype.itemsize))
        if code is None:
            raise ValueError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        encoded = name.encode()
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data, source):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ArchiveError(f"{self.source}: truncated archive")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_archive(path, magic: bytes):
    """Return ``(fingerprint, meta, tensors)``; raises :class:`ArchiveError`."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 4 + 4 + 32 + 4:
        raise ArchiveError(f"{path}: truncated archive")
    if data[:4] != magic:
        raise ArchiveError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    body, trailer = data[:-4], data[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body):
        raise ArchiveError(f"{path}: checksum mismatch (corrupt or truncated file)")
    r = _Reader(body, path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    fp = r.take(32)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable metadata") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise ArchiveError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        dt = _DTYPES[code]
        n = int(np.prod(shape)) * dt.itemsize
        arr = np.frombuffer(r.take(n), dtype=dt).reshape(shape)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if r.pos != len(body):
        raise ArchiveError(f"{path}: trailing bytes after last tensor")
    return fp, meta, tensors
