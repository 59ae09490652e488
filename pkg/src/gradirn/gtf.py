"""GTF: a minimal bit-exact binary tensor format.

Layout (little endian)::

    b"GTF1" | dtype u8 | ndim u8 | 2 reserved zero bytes | ndim x u32 dims | payload

dtype codes: 0 = float32, 1 = float64, 2 = uint8 (label maps).
"""
from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"GTF1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1")}
CODES_BY_KIND = {"f4": 0, "f8": 1, "u1": 2}


class GTFError(ValueError):
    pass


class BadMagicError(GTFError):
    pass


class UnknownDtypeError(GTFError):
    pass


class LengthMismatchError(GTFError):
    pass


def to_bytes(array) -> bytes:
    if not isinstance(array, np.ndarray) and hasattr(array, "data"):
        array = array.data
    arr = np.asarray(array)
    code = CODES_BY_KIND.get(f"{arr.dtype.kind}{arr.dtype.itemsize}")
    if code is None:
        raise UnknownDtypeError(f"cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise GTFError("too many dimensions")
    header = MAGIC + struct.pack("<BBxx", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8:
        raise LengthMismatchError(f"{source}: truncated header ({len(buf)} bytes)")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}")
    code, ndim, r0, r1 = struct.unpack_from("<BBBB", buf, 4)
    if code not in DTYPES:
        raise UnknownDtypeError(f"{source}: unknown dtype code {code}")
    if r0 or r1:
        raise GTFError(f"{source}: reserved header bytes are not zero")
    end = 8 + 4 * ndim
    if len(buf) < end:
        raise LengthMismatchError(f"{source}: truncated dimension table")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    dt = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - end != expected:
        raise LengthMismatchError(
            f"{source}: payload is {len(buf) - end} bytes, expected {expected} for shape {dims}")
    arr = np.frombuffer(buf, dtype=dt, offset=end).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def write(array, path) -> None:
    data = to_bytes(array)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), str(path))


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary (P5) or ASCII (P2) PGM as float32 in [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    kind, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise GTFError(f"{path}: only 8-bit PGM is supported")
    if kind == b"P5":
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos + 1)
    elif kind == b"P2":
        data = np.array(raw[pos:].split()[: w * h], dtype=np.uint8)
    else:
        raise GTFError(f"{path}: not a PGM file")
    return (data.reshape(h, w).astype(np.float32) / maxval)
