"""On-disk formats: CTNS tensor container and binary P5 PGM masks.

CTNS layout: 8-byte magic ``CTNS0001``, u8 dtype code (1 = f32,
2 = f64), u8 rank, little-endian u32 dims, then the raw little-endian
row-major payload. Everything is explicitly little-endian so files are
byte-identical across platforms.
"""

import struct

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"CTNS0001"
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES_BY_KIND = {np.float32: 1, np.float64: 2}


def write_ctns(path, tensor):
    """Write a Tensor (or numpy array) to a CTNS file."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
    if arr.dtype == np.float32:
        code = 1
        payload = arr.astype("<f4", copy=False)
    else:
        code = 2
        payload = arr.astype("<f8", copy=False)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(np.ascontiguousarray(payload).tobytes())


def read_ctns(path, dtype=None):
    """Read a CTNS file into a Tensor.

    `dtype` may request widening (f32 file read as f64 is exact);
    narrowing f64 -> f32 is refused.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 10:
        raise FormatError(f"{path}: truncated CTNS header at byte {len(raw)}")
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r} at byte 0")
    code, rank = struct.unpack("<BB", raw[8:10])
    if code not in _DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code} at byte 8")
    header_end = 10 + 4 * rank
    if len(raw) < header_end:
        raise FormatError(f"{path}: truncated dims at byte {len(raw)}")
    shape = struct.unpack(f"<{rank}I", raw[10:header_end])
    stored = _DTYPE_CODES[code]
    n = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = header_end + n * stored.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length mismatch, expected {expected} bytes got {len(raw)}"
        )
    arr = np.frombuffer(raw[header_end:], dtype=stored).reshape(shape)
    if dtype is not None:
        dtype = np.dtype(dtype)
        if dtype.itemsize < stored.itemsize:
            raise FormatError(f"{path}: refusing lossy narrowing {stored} -> {dtype}")
        arr = arr.astype(dtype)
    else:
        arr = arr.astype(stored.newbyteorder("="))
    return Tensor(arr, dtype=arr.dtype)


def write_pgm(path, mask):
    """Write a 2-D uint8 array as binary PGM (P5, maxval 255)."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise FormatError(f"PGM requires a 2-D array, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_pgm(path):
    """Read a binary P5 PGM (maxval must be 255) into a uint8 array."""
    with open(path, "rb") as f:
        raw = f.read()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # comments (#...) allowed between tokens
    tokens = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated PGM header at byte {pos}")
        c = raw[pos : pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = raw.find(b"\n", pos)
            if nl == -1:
                raise FormatError(f"{path}: unterminated comment at byte {pos}")
            pos = nl + 1
        else:
            end = pos
            while end < len(raw) and not raw[end : end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r} at byte 0)")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError(f"{path}: non-numeric PGM header field before byte {pos}")
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} (must be 255)")
    pos += 1  # single whitespace after maxval
    data = raw[pos:]
    if len(data) != w * h:
        raise FormatError(
            f"{path}: payload length mismatch at byte {pos}: expected {w * h} got {len(data)}"
        )
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()
