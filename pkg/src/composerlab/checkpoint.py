"""Binary tensor container.

Layout (all integers little-endian)::

    b"CMPZ"                      magic
    u32                          format version (1)
    repeated per tensor:
        u32                      name length in bytes
        bytes                    UTF-8 name
        u8                       dtype code: 0 = float32, 1 = float64
        u8                       ndim
        u64 * ndim               dims
        bytes                    raw little-endian values, C order
    u32                          CRC32 of every preceding byte

An empty container is 12 bytes.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import CheckpointError

MAGIC = b"CMPZ"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_checkpoint(tensors: Mapping[str, object]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in tensors.items():
        arr = np.asarray(getattr(value, "data", value))
        if arr.dtype not in _CODES:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor '{name}' has too many dimensions")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(blob: bytes) -> dict[str, np.ndarray]:
    n = len(blob)
    if n < 12:
        raise CheckpointError("file too short for a checkpoint", offset=n)
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic", offset=0)
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported format version {version}", offset=4)
    (stored,) = struct.unpack_from("<I", blob, n - 4)
    actual = zlib.crc32(blob[: n - 4]) & 0xFFFFFFFF
    if stored != actual:
        raise CheckpointError(f"CRC mismatch (stored {stored:08x}, computed {actual:08x})", offset=n - 4)
    end = n - 4
    pos = 8
    out: dict[str, np.ndarray] = {}

    def need(k: int, what: str) -> None:
        if pos + k > end:
            raise CheckpointError(f"truncated {what}", offset=pos)

    while pos < end:
        need(4, "name length")
        (ln,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need(ln, "name")
        try:
            name = blob[pos : pos + ln].decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("name is not valid UTF-8", offset=pos) from None
        pos += ln
        need(2, "dtype/ndim")
        code, ndim = struct.unpack_from("<BB", blob, pos)
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}", offset=pos)
        pos += 2
        need(8 * ndim, "dims")
        dims = struct.unpack_from(f"<{ndim}Q", blob, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"data of '{name}'")
        if name in out:
            raise CheckpointError(f"duplicate tensor name '{name}'", offset=pos)
        arr = np.frombuffer(blob, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    return out


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, object]) -> int:
    """Write ``tensors`` to ``path``; returns the byte count."""
    blob = encode_checkpoint(tensors)
    Path(path).write_bytes(blob)
    return len(blob)


def load_checkpoint(path: Union[str, Path]) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise CheckpointError(f"checkpoint not found: {p}")
    return decode_checkpoint(p.read_bytes())
