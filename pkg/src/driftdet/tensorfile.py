"""Fixed little-endian binary container for one rank-4 tensor.

Layout: magic "TNSR" | version u8 | dtype u8 (0 = f32, 1 = f64) |
ndim u8 (always 4) | four u64 dims | row-major payload. Round trips are
bit-exact, which the checkpoint/resume contract depends on.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"TNSR"
VERSION = 1
HEADER = struct.Struct("<4sBBB4Q")

_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_WIRE_FOR_CODE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_NATIVE_FOR_CODE = {0: np.float32, 1: np.float64}


def save_tensor(t: Tensor, path) -> None:
    code = _CODE_FOR_DTYPE.get(t.data.dtype)
    if code is None:
        raise FormatError(f"unsupported dtype {t.data.dtype}")
    header = HEADER.pack(MAGIC, VERSION, code, 4, *t.shape)
    payload = np.ascontiguousarray(t.data, dtype=_WIRE_FOR_CODE[code]).tobytes()
    Path(path).write_bytes(header + payload)


def load_tensor(path) -> Tensor:
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size:
        raise FormatError(
            f"truncated header: expected {HEADER.size} bytes, got {len(blob)}")
    magic, version, code, ndim, *dims = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if code not in _WIRE_FOR_CODE:
        raise FormatError(f"unknown dtype {code}")
    if ndim != 4:
        raise FormatError(f"unsupported ndim {ndim}")
    if any(d < 1 for d in dims):
        raise FormatError(f"non-positive dims {tuple(dims)}")
    wire = _WIRE_FOR_CODE[code]
    expected = int(np.prod(dims)) * wire.itemsize
    actual = len(blob) - HEADER.size
    if actual != expected:
        raise FormatError(
            f"truncated payload: expected {expected} bytes, got {actual}")
    arr = np.frombuffer(blob, dtype=wire, offset=HEADER.size)
    return Tensor(arr.astype(_NATIVE_FOR_CODE[code]).reshape(dims))
