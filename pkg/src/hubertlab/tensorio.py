"""Read/write the repo-wide tensor container.

Layout: magic ``TNSR``, version (u8), rank (u8), one u32 per dimension, then
the row-major float32 payload, everything little-endian.
"""

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import IngestionError

MAGIC = b"TNSR"
VERSION = 1


def encode_tensor(array) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("rank must fit in one byte")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack("<%dI" % arr.ndim, *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6:
        raise IngestionError("tensor header: truncated (need at least 6 bytes)")
    if blob[:4] != MAGIC:
        raise IngestionError(f"tensor magic: expected {MAGIC!r}, got {blob[:4]!r}")
    version, rank = struct.unpack_from("<BB", blob, 4)
    if version != VERSION:
        raise IngestionError(f"tensor version: unsupported value {version}")
    offset = 6
    if len(blob) < offset + 4 * rank:
        raise IngestionError("tensor dims: truncated")
    dims = struct.unpack_from("<%dI" % rank, blob, offset)
    offset += 4 * rank
    expected = 4 * int(np.prod(dims, dtype=np.int64))
    if len(blob) - offset != expected:
        raise IngestionError(
            f"tensor payload: expected {expected} bytes for dims {dims}, got {len(blob) - offset}"
        )
    arr = np.frombuffer(blob, dtype="<f4", offset=offset).reshape(dims)
    return arr.astype(np.float64)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_tensor(path, array) -> str:
    """Write ``array`` and return the sha256 of the encoded bytes."""
    blob = encode_tensor(array)
    atomic_write_bytes(path, blob)
    return hashlib.sha256(blob).hexdigest()


def load_tensor(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"tensor file: cannot read {path}: {exc}") from exc
    return decode_tensor(blob)


def as_stored(array) -> np.ndarray:
    """Round ``array`` through the on-disk precision."""
    return np.asarray(array, dtype=np.float64).astype("<f4").astype(np.float64)
