"""Self-describing little-endian tensor archive (``RESQ1``).

Layout::

    header   magic "RESQ1" | version u8 | reserved u16
             n_tensors u32 | index_len u32 | meta_len u32 | index_crc32 u32
    index    n_tensors entries:
             name_len u16 | name utf8 | dtype u8 | ndim u8 | shape u64*ndim
             | offset u64 | nbytes u64
    meta     JSON text (sorted keys, compact separators)
    payload  raw tensors, each starting on an 8-byte boundary, zero padded

Offsets are absolute. dtype codes: 0 f32, 1 f64, 2 int4 packed two per byte
(low nibble holds the even index, signed two's complement), 3 i8, 4 u8.
Writing is atomic (temp file in the target directory, then rename).
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ArchiveFormatError",
    "Archive",
    "PackedInt4",
    "pack_int4",
    "unpack_int4",
    "write_archive",
    "read_archive",
    "archive_bytes",
]

MAGIC = b"RESQ1"
VERSION = 1
_HEADER = struct.Struct("<5sBHIIII")
_ALIGN = 8

F32, F64, I4, I8, U8 = 0, 1, 2, 3, 4
_NP = {F32: np.dtype("<f4"), F64: np.dtype("<f8"), I8: np.dtype("i1"), U8: np.dtype("u1")}


class ArchiveFormatError(ValueError):
    pass


@dataclass(frozen=True)
class PackedInt4:
    """Marker wrapper: store ``values`` (int, each in [-8, 7]) as packed nibbles."""

    values: np.ndarray


def pack_int4(x) -> bytes:
    v = np.asarray(x).ravel()
    if v.size and (v.min() < -8 or v.max() > 7):
        raise ValueError("int4 packing needs values in [-8, 7]")
    nib = (v.astype(np.int64) & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.concatenate([nib, np.zeros(1, np.uint8)])
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(buf: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8)
    nib = np.empty(b.size * 2, dtype=np.uint8)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[:count].astype(np.int8)
    return np.where(nib > 7, nib - 16, nib).astype(np.int8)


def _code_of(arr) -> int:
    if isinstance(arr, PackedInt4):
        return I4
    dt = np.asarray(arr).dtype
    if dt == np.float32:
        return F32
    if dt == np.float64:
        return F64
    if dt == np.int8:
        return I8
    if dt == np.uint8:
        return U8
    raise ArchiveFormatError(f"unsupported dtype {dt}")


def _payload(arr) -> tuple[int, tuple, bytes]:
    code = _code_of(arr)
    if code == I4:
        v = np.asarray(arr.values)
        return code, v.shape, pack_int4(v)
    a = np.asarray(arr)
    return code, a.shape, np.ascontiguousarray(a, dtype=_NP[code]).tobytes()


@dataclass
class Archive:
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __contains__(self, name):
        return name in self.tensors

    def __getitem__(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            raise KeyError(f"archive has no tensor {name!r}") from None

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def archive_bytes(arc: Archive) -> bytes:
    """Serialize; tensors are written in sorted name order."""
    names = sorted(arc.tensors)
    blobs = [(n, *_payload(arc.tensors[n])) for n in names]
    meta = json.dumps(arc.meta, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()

    def index_bytes(offsets):
        parts = []
        for (name, code, shape, data), off in zip(blobs, offsets):
            nb = name.encode("utf-8")
            parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, len(shape)))
            parts.append(struct.pack(f"<{len(shape)}Q", *shape))
            parts.append(struct.pack("<QQ", off, len(data)))
        return b"".join(parts)

    # index length does not depend on offset values
    idx_len = len(index_bytes([0] * len(blobs)))
    pos = _HEADER.size + idx_len + len(meta)
    pos += _pad(pos)
    offsets = []
    for _, _, _, data in blobs:
        offsets.append(pos)
        pos += len(data) + _pad(len(data))
    index = index_bytes(offsets)
    header = _HEADER.pack(MAGIC, VERSION, 0, len(blobs), len(index), len(meta), zlib.crc32(index))
    out = bytearray(header + index + meta)
    out += b"\0" * _pad(len(out))
    for _, _, _, data in blobs:
        out += data + b"\0" * _pad(len(data))
    return bytes(out)


def write_archive(path, arc: Archive) -> None:
    data = archive_bytes(arc)
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".resq-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_archive(data: bytes) -> Archive:
    if len(data) < _HEADER.size:
        raise ArchiveFormatError("file too short for a RESQ1 header")
    magic, version, _, n, idx_len, meta_len, crc = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArchiveFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported archive version {version}")
    i0 = _HEADER.size
    index = data[i0 : i0 + idx_len]
    if len(index) != idx_len:
        raise ArchiveFormatError("truncated index")
    if zlib.crc32(index) != crc:
        raise ArchiveFormatError("index CRC32 mismatch")
    try:
        meta = json.loads(data[i0 + idx_len : i0 + idx_len + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveFormatError(f"metadata block is not valid JSON: {exc}") from exc

    tensors = {}
    spans = []
    p = 0
    try:
        for _ in range(n):
            (nl,) = struct.unpack_from("<H", index, p)
            p += 2
            name = index[p : p + nl].decode("utf-8")
            p += nl
            code, ndim = struct.unpack_from("<BB", index, p)
            p += 2
            shape = struct.unpack_from(f"<{ndim}Q", index, p)
            p += 8 * ndim
            off, nbytes = struct.unpack_from("<QQ", index, p)
            p += 16
            if name in tensors:
                raise ArchiveFormatError(f"duplicate tensor name {name!r}")
            if off + nbytes > len(data):
                raise ArchiveFormatError(f"tensor {name!r} extends past end of file")
            count = int(np.prod(shape, dtype=np.int64))
            buf = data[off : off + nbytes]
            if code == I4:
                if nbytes != (count + 1) // 2:
                    raise ArchiveFormatError(f"tensor {name!r}: size does not match shape")
                arr = unpack_int4(buf, count).reshape(shape)
            elif code in _NP:
                if nbytes != count * _NP[code].itemsize:
                    raise ArchiveFormatError(f"tensor {name!r}: size does not match shape")
                arr = np.frombuffer(buf, dtype=_NP[code]).reshape(shape).copy()
            else:
                raise ArchiveFormatError(f"tensor {name!r}: unknown dtype code {code}")
            tensors[name] = PackedInt4(arr) if code == I4 else arr
            spans.append((off, off + nbytes, name))
    except (struct.error, UnicodeDecodeError) as exc:
        raise ArchiveFormatError(f"corrupt index: {exc}") from exc
    if p != idx_len:
        raise ArchiveFormatError("index length mismatch")
    spans.sort()
    for (_, e0, a), (s1, _, b) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ArchiveFormatError(f"tensors {a!r} and {b!r} overlap")
    return Archive(tensors, meta)


def read_archive(path) -> Archive:
    with open(path, "rb") as f:
        return parse_archive(f.read())
