"""Versioned binary container for named float64 tensors.

Layout, all integers u32 little-endian::

    b"ATTD" | version | len(meta) | meta (UTF-8 JSON) | n_tensors |
    repeated: len(name) | name (UTF-8) | rank | dims... | float64 LE payload

Meta JSON is written with sorted keys so identical content gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"ATTD"
VERSION = 1


class ContainerError(ValueError):
    """Base class for unreadable containers."""


class FormatError(ContainerError):
    """Magic bytes or structure are wrong."""


class VersionError(ContainerError):
    """Container was written by an unsupported format version."""


class TruncatedError(ContainerError):
    """The payload ended before the declared content."""


def dumps_meta(meta: Mapping) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    blob = dumps_meta(meta or {})
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"container truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("bad magic bytes: not an ATTD container")
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise VersionError(f"container version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable meta block: {exc}") from exc
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64)
        tensors[name] = arr.reshape(dims)
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after last tensor")
    return tensors, meta


def write(path, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode(tensors, meta))
    except OSError as exc:
        raise OSError(f"cannot write container {path}: {exc}") from exc


def read(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read container {path}: {exc}") from exc
    try:
        return decode(buf)
    except ContainerError as exc:
        raise type(exc)(f"{path}: {exc}") from exc
