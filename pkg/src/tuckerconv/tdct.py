"""Reader/writer for the ``.tdct`` binary tensor format.

Layout: b"TDCT", version byte (1), dtype code byte (1=f32, 2=f64), ndim
byte, ndim little-endian u64 dims, then the row-major little-endian payload.
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TDCT"
VERSION = 1
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class TensorFileError(ValueError):
    """Malformed or unsupported ``.tdct`` file."""


def to_bytes(t: np.ndarray) -> bytes:
    t = np.asarray(t)
    code = _DTYPES.get(t.dtype)
    if code is None:
        raise TensorFileError(f"unsupported dtype {t.dtype}; use float32 or float64")
    if t.ndim > 255:
        raise TensorFileError("too many dimensions")
    header = MAGIC + struct.pack("<BBB", VERSION, code, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + np.ascontiguousarray(t, dtype=_CODES[code]).tobytes()


def from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise TensorFileError("bad magic: not a .tdct file")
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if code not in _CODES:
        raise TensorFileError(f"unsupported dtype code {code}")
    off = 7 + 8 * ndim
    if len(buf) < off:
        raise TensorFileError("truncated header")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 7)
    dt = _CODES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != need:
        raise TensorFileError(
            f"payload is {len(buf) - off} bytes, expected {need} for dims {dims}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(t: np.ndarray, path) -> None:
    data = to_bytes(t)
    tmp = f"{os.fspath(path)}.part"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_tensor(path, dtype=None) -> np.ndarray:
    with open(path, "rb") as fh:
        t = from_bytes(fh.read())
    if dtype is not None:
        t = t.astype(dtype)
    return t
