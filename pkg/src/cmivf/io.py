"""CMEB embedding files.

Layout (little endian): magic ``b"CMEB"``, u32 version (1), u64 rows,
u32 dim, u8 dtype (0 = float32), u8 normalized flag, 6 zero bytes, then
rows * dim float32 values in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .vecspace import EmbeddingSet

CMEB_MAGIC = b"CMEB"
CMEB_VERSION = 1
_HEADER = struct.Struct("<4sIQIBB6x")
HEADER_SIZE = _HEADER.size


def cmeb_bytes(emb: EmbeddingSet) -> bytes:
    header = _HEADER.pack(CMEB_MAGIC, CMEB_VERSION, emb.n, emb.d, 0, int(emb.normalized))
    return header + emb.data.astype("<f4", copy=False).tobytes(order="C")


def parse_cmeb(buf, offset: int = 0):
    """Decode a CMEB blob starting at ``offset``; returns (EmbeddingSet, end offset)."""
    if len(buf) - offset < HEADER_SIZE:
        raise FormatError("truncated CMEB header")
    magic, version, n, d, dtype, normalized = _HEADER.unpack_from(buf, offset)
    if magic != CMEB_MAGIC:
        raise FormatError(f"bad CMEB magic {magic!r}")
    if version != CMEB_VERSION:
        raise FormatError(f"unsupported CMEB version {version}")
    if dtype != 0:
        raise FormatError(f"unsupported CMEB dtype code {dtype}")
    start = offset + HEADER_SIZE
    end = start + 4 * n * d
    if len(buf) < end:
        raise FormatError(f"truncated CMEB payload: need {end - start} bytes, have {len(buf) - start}")
    data = np.frombuffer(buf, dtype="<f4", count=n * d, offset=start).reshape(n, d)
    return EmbeddingSet(data.astype(np.float32), normalized=bool(normalized)), end


def write_cmeb(path, emb: EmbeddingSet) -> None:
    Path(path).write_bytes(cmeb_bytes(emb))


def read_cmeb(path) -> EmbeddingSet:
    buf = Path(path).read_bytes()
    emb, end = parse_cmeb(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after CMEB payload")
    return emb
