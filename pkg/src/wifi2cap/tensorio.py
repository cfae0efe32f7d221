"""Binary tensor files and the checkpoint container.

Every array artifact (dataset payloads, checkpoint parameters) uses one
format: a fixed 64-byte header followed by the raw little-endian,
row-major payload.

Header layout (little-endian):
    bytes  0..7   magic ``b"W2CTENS\\0"``
    byte   8      dtype code (1=f32, 2=f64, 3=i32, 4=i64)
    byte   9      rank (0..6)
    bytes 10..15  reserved, zero
    bytes 16..63  six u64 dims (unused trailing dims are zero)

A checkpoint is a single file holding named tensor records plus one JSON
metadata record, so the whole thing can be checksummed byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"W2CTENS\0"
CONTAINER_MAGIC = b"W2CCKPT1"
HEADER_SIZE = 64
MAX_RANK = 6

_DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TensorFormatError(ValueError):
    """Raised on malformed tensor headers or container records."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    """Serialize an array to header + row-major little-endian payload."""
    arr = np.ascontiguousarray(arr)
    dtype = arr.dtype.newbyteorder("<")
    if dtype not in _DTYPE_CODES:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > MAX_RANK:
        raise TensorFormatError(f"rank {arr.ndim} exceeds {MAX_RANK}")
    dims = list(arr.shape) + [0] * (MAX_RANK - arr.ndim)
    header = struct.pack(
        "<8sBB6x6Q", TENSOR_MAGIC, _DTYPE_CODES[dtype], arr.ndim, *dims
    )
    assert len(header) == HEADER_SIZE
    return header + arr.astype(dtype, copy=False).tobytes(order="C")


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if len(blob) < HEADER_SIZE:
        raise TensorFormatError("blob shorter than header")
    magic, code, rank, *dims = struct.unpack("<8sBB6x6Q", blob[:HEADER_SIZE])
    if magic != TENSOR_MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if code not in _CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    if rank > MAX_RANK:
        raise TensorFormatError(f"bad rank {rank}")
    shape = tuple(dims[:rank])
    dtype = _CODE_DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    expected = HEADER_SIZE + count * dtype.itemsize
    if len(blob) != expected:
        raise TensorFormatError(f"payload size {len(blob)} != expected {expected}")
    arr = np.frombuffer(blob, dtype=dtype, count=count, offset=HEADER_SIZE)
    return arr.reshape(shape).copy()


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path: str | Path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# --------------------------------------------------------------------------
# Checkpoint container: CONTAINER_MAGIC, u32 record count, then per record
# u16 name length, name bytes (utf-8), u8 kind (0=tensor, 1=json),
# u64 payload length, payload bytes. Records are written in sorted name
# order so identical state always produces identical bytes.
# --------------------------------------------------------------------------

_KIND_TENSOR = 0
_KIND_JSON = 1

META_KEY = "__meta__"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors plus a JSON metadata record to one file."""
    if META_KEY in tensors:
        raise TensorFormatError(f"{META_KEY!r} is reserved for metadata")
    records = {name: (_KIND_TENSOR, tensor_to_bytes(a)) for name, a in tensors.items()}
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    records[META_KEY] = (_KIND_JSON, meta_blob)

    out = bytearray()
    out += CONTAINER_MAGIC
    out += struct.pack("<I", len(records))
    for name in sorted(records):
        kind, payload = records[name]
        name_b = name.encode()
        out += struct.pack("<H", len(name_b))
        out += name_b
        out += struct.pack("<BQ", kind, len(payload))
        out += payload
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, meta) from a checkpoint file."""
    blob = Path(path).read_bytes()
    if blob[:8] != CONTAINER_MAGIC:
        raise TensorFormatError(f"not a checkpoint container: {path}")
    (count,) = struct.unpack_from("<I", blob, 8)
    off = 12
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + name_len].decode()
        off += name_len
        kind, size = struct.unpack_from("<BQ", blob, off)
        off += 9
        payload = blob[off : off + size]
        off += size
        if kind == _KIND_TENSOR:
            tensors[name] = tensor_from_bytes(payload)
        elif kind == _KIND_JSON:
            meta = json.loads(payload.decode())
        else:
            raise TensorFormatError(f"unknown record kind {kind}")
    if off != len(blob):
        raise TensorFormatError("trailing bytes after last record")
    return tensors, meta


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
