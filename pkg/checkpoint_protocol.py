"""Binary container for named float64 parameter blocks.

File format (all integers little-endian):
  bytes 0-3  : MAGIC (b"CVXC")
  bytes 4-5  : VERSION (u16, currently 1)
  u32        : META_LEN, followed by META_LEN bytes of UTF-8 JSON (sorted keys)
  u32        : TENSOR_COUNT
  per tensor, sorted by name:
    u16      : NAME_LEN, followed by NAME_LEN bytes of UTF-8 name
    u8       : NDIM
    u32*NDIM : extents
    f64*N    : row-major payload, N = product(extents)
  last 32    : CHECKSUM = sha256(every preceding byte)
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"CVXC"
VERSION = 1
CHECKSUM_SIZE = 32
HEADER_SIZE = len(MAGIC) + 2


class CheckpointFormatError(ValueError):
    """The bytes are not a valid checkpoint container."""


def encode_checkpoint(tensors: dict[str, np.ndarray], metadata: dict[str, Any] | None = None) -> bytes:
    meta_bytes = json.dumps(metadata or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")

    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if array.ndim > 0xFF:
            raise ValueError(f"tensor {name} has too many dimensions: {array.ndim}")
        out += struct.pack("<H", len(encoded_name))
        out += encoded_name
        out += struct.pack("<B", array.ndim)
        for extent in array.shape:
            out += struct.pack("<I", extent)
        out += array.tobytes(order="C")
    out += hashlib.sha256(out).digest()
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes, end: int) -> None:
        self.data = data
        self.end = end
        self.cursor = 0

    def take(self, size: int) -> bytes:
        if self.cursor + size > self.end:
            raise CheckpointFormatError("truncated checkpoint")
        chunk = self.data[self.cursor : self.cursor + size]
        self.cursor += size
        return chunk

    def unpack(self, fmt: str) -> int:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def decode_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(data) < HEADER_SIZE + CHECKSUM_SIZE:
        raise CheckpointFormatError("bad checkpoint size")
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointFormatError("bad magic")
    version = struct.unpack("<H", data[len(MAGIC) : HEADER_SIZE])[0]
    if version != VERSION:
        raise CheckpointFormatError(f"bad version: {version} (expected {VERSION})")
    body_end = len(data) - CHECKSUM_SIZE
    if hashlib.sha256(data[:body_end]).digest() != data[body_end:]:
        raise CheckpointFormatError("checksum mismatch")

    reader = _Reader(data, body_end)
    reader.cursor = HEADER_SIZE
    meta_len = reader.unpack("<I")
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"bad metadata: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    count = reader.unpack("<I")
    for _ in range(count):
        name_len = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        ndim = reader.unpack("<B")
        shape = tuple(reader.unpack("<I") for _ in range(ndim))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = reader.take(8 * size)
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if reader.cursor != body_end:
        raise CheckpointFormatError(f"trailing bytes: {body_end - reader.cursor}")
    return tensors, metadata


def write_atomic(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def write_checkpoint(path: Path, tensors: dict[str, np.ndarray], metadata: dict[str, Any] | None = None) -> None:
    write_atomic(path, encode_checkpoint(tensors, metadata))


def read_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint file not found: {path}")
    return decode_checkpoint(path.read_bytes())
