"""
Tensor container ("DFRT") - a flat binary file of named float64 tensors.

Layout (all integers little-endian)::

    magic    4 bytes  b"DFRT"
    version  u32
    count    u32
    entry*   name_len u32, name (UTF-8), rank u32, dims u64 * rank,
             payload f64 * prod(dims), row-major
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .errors import ArgumentError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"DFRT"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


def encode_container(entries: Mapping[str, np.ndarray]) -> bytes:
    names = list(entries.keys())
    if len(set(names)) != len(names):
        raise ArgumentError("tensor names must be unique within a container")
    parts = [MAGIC, _U32.pack(FORMAT_VERSION), _U32.pack(len(names))]
    for name in names:
        array = np.asarray(entries[name], dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(_U32.pack(len(encoded)))
        parts.append(encoded)
        parts.append(_U32.pack(array.ndim))
        parts.extend(_U64.pack(dim) for dim in array.shape)
        parts.append(np.ascontiguousarray(array).tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int, what: str) -> bytes:
        if self.offset + n > len(self.data):
            raise FormatError(self.offset, f"truncated while reading {what} ({n} bytes needed, "
                                           f"{len(self.data) - self.offset} left)")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what: str) -> int:
        return _U32.unpack(self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return _U64.unpack(self.take(8, what))[0]


def decode_container(data: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(data)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(0, f"bad magic {magic!r}, expected {MAGIC!r}")
    version_offset = reader.offset
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise FormatError(version_offset, f"unsupported format version {version}")
    count = reader.u32("entry count")
    entries: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_offset = reader.offset
        name_len = reader.u32("name length")
        try:
            name = reader.take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(name_offset + 4, f"name is not valid UTF-8: {e}") from e
        if name in entries:
            raise FormatError(name_offset, f"duplicate tensor name {name!r}")
        rank = reader.u32("rank")
        dims = tuple(reader.u64("dimension") for _ in range(rank))
        n_values = 1
        for dim in dims:
            n_values *= dim
        payload = reader.take(8 * n_values, f"payload of {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if reader.offset != len(data):
        raise FormatError(reader.offset, f"{len(data) - reader.offset} trailing bytes after last entry")
    return entries


def save_container(path: Path, entries: Mapping[str, np.ndarray]) -> Path:
    """Write ``entries`` to ``path``; returns the path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_container(entries)
    with open(path, "wb") as f:
        f.write(data)
    logger.debug(f"Saved {len(entries)} tensors ({len(data)} bytes) to {path}")
    return path


def load_container(path: Path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        data = f.read()
    return decode_container(data)
