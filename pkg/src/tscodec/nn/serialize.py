"""Versioned little-endian tensor archive used for weights and checkpoints.

Layout (all integers little-endian)::

    magic      4s   b"TSWT"
    version    u16  ARCHIVE_VERSION
    precision  u8   float storage code (0=f8 train, 1=f4, 2=f2 edge)
    reserved   u8   0
    count      u32  number of tensors
    meta_len   u32  length of the UTF-8 JSON metadata block
    meta       meta_len bytes
    table      count x (u16 name_len, name, u8 dtype code, u8 ndim, ndim x u32 dim)
               dtype codes: 0/1/2 float per precision, 3 int64, 4 uint8
    data       tensors in table order, C-contiguous, little-endian
    crc32      u32  over every preceding byte
"""
import io
import json
import struct
import zlib

import numpy as np

from ..errors import FormatError

MAGIC = b"TSWT"
ARCHIVE_VERSION = 1

PRECISIONS = {"train": 0, "f4": 1, "edge": 2}
_FLOAT_DTYPES = {0: "<f8", 1: "<f4", 2: "<f2"}
_INT_CODE = 3
_BYTE_CODE = 4
_DTYPES = {**_FLOAT_DTYPES, _INT_CODE: "<i8", _BYTE_CODE: "u1"}


def dumps(tensors, precision="train", meta=None):
    """Serialize a ``{name: ndarray}`` mapping to bytes."""
    try:
        pcode = PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; choose from {sorted(PRECISIONS)}") from None
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(struct.pack("<4sHBBII", MAGIC, ARCHIVE_VERSION, pcode, 0, len(tensors), len(meta_bytes)))
    out.write(meta_bytes)
    blobs = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            code = _BYTE_CODE
        elif np.issubdtype(arr.dtype, np.integer):
            code = _INT_CODE
        elif np.issubdtype(arr.dtype, np.floating):
            code = pcode
        else:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    for blob in blobs:
        out.write(blob)
    body = out.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated archive: need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(data):
    """Inverse of :func:`dumps`; returns ``(tensors, meta, precision)``."""
    r = _Reader(bytes(data))
    magic, version, pcode, _, count, meta_len = r.unpack("<4sHBBII")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != ARCHIVE_VERSION:
        raise FormatError(f"archive version {version} unsupported (expected {ARCHIVE_VERSION})", code="E_VERSION")
    if pcode not in _FLOAT_DTYPES:
        raise FormatError(f"unknown precision code {pcode}")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    table = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise FormatError(f"{name}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I")
        table.append((name, code, shape))
    tensors = {}
    for name, code, shape in table:
        dtype = np.dtype(_DTYPES[code])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="))
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after archive")
    if zlib.crc32(r.data[:body_end]) != crc:
        raise FormatError("archive checksum mismatch")
    precision = {v: k for k, v in PRECISIONS.items()}[pcode]
    return tensors, meta, precision


def save_weights(tensors, path, precision="train", meta=None):
    data = dumps(tensors, precision, meta)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_weights(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
