"""Bit-packed frames of RVQ indices and the rate arithmetic around them.

Frame layout, version 1 (little-endian header, MSB-first payload)::

    offset  size  field
    0       4     magic b"TSFR"
    4       1     version (1)
    5       1     flags (bit 0: timestamp present)
    6       1     n_active  (quantizer rows in the payload)
    7       1     bits per index (ceil(log2 k), at least 1)
    8       2     c_lat
    10      4     k (codebook size)
    14      4     window_id (sequence number)
    18      8     timestamp, float64 seconds (only if flags bit 0)
    ..      2     payload length in bytes
    ..      n     payload

The payload holds ``n_active * c_lat`` indices in quantizer-major,
channel-minor order, each written most-significant bit first with no gaps;
the final byte is zero-padded.

A frame *file* is a 40-byte file header (magic b"TSFF", u8 version, three
zero bytes, 32-byte bundle SHA-256 digest) followed by frames back to back.
"""
from dataclasses import dataclass
from fractions import Fraction
import struct

import numpy as np

from .errors import DigestMismatch, FormatError, IndexRangeError, ShapeError

FRAME_MAGIC = b"TSFR"
FRAME_VERSION = 1
FILE_MAGIC = b"TSFF"
FILE_VERSION = 1
FLAG_TIMESTAMP = 0x01

_HEAD = struct.Struct("<4sBBBBHII")
_TS = struct.Struct("<d")
_LEN = struct.Struct("<H")
_FILE_HEAD = struct.Struct("<4sB3x32s")


def index_bits(k):
    """Bits needed per index for a codebook of size ``k``."""
    if k < 2:
        raise ValueError("codebook size must be >= 2")
    return (k - 1).bit_length()


def payload_bits(n_active, c_lat, k):
    return n_active * c_lat * index_bits(k)


def payload_bytes(n_active, c_lat, k):
    return -(-payload_bits(n_active, c_lat, k) // 8)


def pack_bits(values, width):
    """MSB-first concatenation of ``width``-bit unsigned values, zero-padded."""
    values = np.asarray(values, dtype=np.int64).ravel()
    shifts = np.arange(width - 1, -1, -1, dtype=np.int64)
    bits = ((values[:, None] >> shifts) & 1).astype(np.uint8)
    return np.packbits(bits.ravel(), bitorder="big").tobytes()


def unpack_bits(data, count, width):
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="big")
    if len(bits) < count * width:
        raise FormatError(f"payload holds {len(bits)} bits, need {count * width}")
    weights = np.int64(1) << np.arange(width - 1, -1, -1, dtype=np.int64)
    return bits[:count * width].reshape(count, width).astype(np.int64) @ weights


@dataclass
class CompressedFrame:
    n_active: int
    c_lat: int
    k: int
    payload: bytes
    window_id: int = 0
    timestamp: float = None
    version: int = FRAME_VERSION

    @property
    def bits(self):
        return index_bits(self.k)

    @property
    def header_size(self):
        return _HEAD.size + (_TS.size if self.timestamp is not None else 0) + _LEN.size

    def to_bytes(self):
        flags = FLAG_TIMESTAMP if self.timestamp is not None else 0
        out = _HEAD.pack(FRAME_MAGIC, self.version, flags, self.n_active, self.bits,
                         self.c_lat, self.k, self.window_id)
        if self.timestamp is not None:
            out += _TS.pack(self.timestamp)
        return out + _LEN.pack(len(self.payload)) + self.payload

    @classmethod
    def read_from(cls, data, offset=0):
        """Parse one frame at ``offset``; returns ``(frame, next_offset)``."""
        if len(data) - offset < _HEAD.size:
            raise FormatError(f"truncated frame header at offset {offset}")
        magic, version, flags, n_active, bits, c_lat, k, window_id = _HEAD.unpack_from(data, offset)
        if magic != FRAME_MAGIC:
            raise FormatError(f"bad frame magic {magic!r} at offset {offset}")
        if version != FRAME_VERSION:
            raise FormatError(f"frame version {version} unsupported", code="E_VERSION")
        if k < 2 or bits != index_bits(k):
            raise FormatError(f"header bit width {bits} inconsistent with k={k}")
        pos = offset + _HEAD.size
        timestamp = None
        if flags & FLAG_TIMESTAMP:
            if len(data) - pos < _TS.size:
                raise FormatError("truncated frame timestamp")
            (timestamp,) = _TS.unpack_from(data, pos)
            pos += _TS.size
        if len(data) - pos < _LEN.size:
            raise FormatError("truncated frame length field")
        (length,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size
        expected = payload_bytes(n_active, c_lat, k)
        if length != expected:
            raise FormatError(f"payload length {length} != {expected} for n_active={n_active}, c_lat={c_lat}, k={k}")
        if len(data) - pos < length:
            raise FormatError(f"truncated payload: {len(data) - pos} of {length} bytes")
        payload = bytes(data[pos:pos + length])
        frame = cls(n_active, c_lat, k, payload, window_id, timestamp, version)
        return frame, pos + length

    @classmethod
    def from_bytes(cls, data):
        frame, end = cls.read_from(data)
        if end != len(data):
            raise FormatError(f"{len(data) - end} trailing bytes after frame")
        return frame


def pack(indices, k, window_id=0, timestamp=None):
    """IndexMatrix ``(n_active, c_lat)`` -> :class:`CompressedFrame`."""
    indices = np.asarray(indices)
    if indices.ndim != 2 or indices.shape[0] < 1 or indices.shape[1] < 1:
        raise ShapeError(f"index matrix must be (n_active, c_lat), got {indices.shape}")
    if not np.issubdtype(indices.dtype, np.integer):
        raise ShapeError("index matrix must be integer")
    if indices.min() < 0 or indices.max() >= k:
        raise IndexRangeError(f"index outside [0, {k})")
    n_active, c_lat = indices.shape
    if n_active > 255 or c_lat > 0xFFFF:
        raise ShapeError(f"index matrix {indices.shape} exceeds frame header limits")
    return CompressedFrame(n_active, c_lat, k, pack_bits(indices, index_bits(k)), window_id, timestamp)


def unpack(frame):
    """Exact inverse of :func:`pack`."""
    if isinstance(frame, (bytes, bytearray, memoryview)):
        frame = CompressedFrame.from_bytes(bytes(frame))
    if len(frame.payload) != payload_bytes(frame.n_active, frame.c_lat, frame.k):
        raise FormatError("payload length inconsistent with header")
    values = unpack_bits(frame.payload, frame.n_active * frame.c_lat, frame.bits)
    if values.max(initial=0) >= frame.k:
        raise IndexRangeError(f"decoded index >= k={frame.k}")
    return values.reshape(frame.n_active, frame.c_lat)


def write_frame_file(path, frames, digest):
    digest = bytes.fromhex(digest) if isinstance(digest, str) else digest
    with open(path, "wb") as fh:
        fh.write(_FILE_HEAD.pack(FILE_MAGIC, FILE_VERSION, digest))
        for frame in frames:
            fh.write(frame.to_bytes())


def read_frame_file(path, expected_digest=None):
    """Return ``(digest_hex, [frames])``; checks the digest when one is given."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _FILE_HEAD.size:
        raise FormatError("truncated frame file header")
    magic, version, digest = _FILE_HEAD.unpack_from(data)
    if magic != FILE_MAGIC:
        raise FormatError(f"bad frame file magic {magic!r}")
    if version != FILE_VERSION:
        raise FormatError(f"frame file version {version} unsupported", code="E_VERSION")
    if expected_digest is not None and digest.hex() != expected_digest:
        raise DigestMismatch(f"frame file digest {digest.hex()[:16]}... does not match bundle {expected_digest[:16]}...")
    frames, pos = [], _FILE_HEAD.size
    while pos < len(data):
        frame, pos = CompressedFrame.read_from(data, pos)
        frames.append(frame)
    return digest.hex(), frames


@dataclass(frozen=True)
class RateReport:
    n_active: int
    raw_bits: int
    compressed_bits: int
    header_bits: int
    window_seconds: Fraction

    @property
    def cr(self):
        """Exact ratio on payload bits (framing excluded)."""
        return Fraction(self.raw_bits, self.compressed_bits)

    @property
    def cr_floor(self):
        return self.raw_bits // self.compressed_bits

    @property
    def effective_cr(self):
        return Fraction(self.raw_bits, self.compressed_bits + self.header_bits)

    @property
    def bitrate_bps(self):
        return Fraction(self.compressed_bits) / self.window_seconds

    def as_dict(self):
        return {
            "n_active": self.n_active,
            "cr": self.cr_floor,
            "cr_exact": str(self.cr),
            "effective_cr": round(float(self.effective_cr), 3),
            "bitrate_bps": float(self.bitrate_bps),
            "raw_bits": self.raw_bits,
            "compressed_bits": self.compressed_bits,
            "payload_bytes": -(-self.compressed_bits // 8),
        }


def compression_ratio(cfg, n_active, header_bits=None):
    """CR and bitrate for one window at ``n_active`` quantizers.

    raw bits = c_in * t_in * sample_bits; compressed bits = c_lat * n_active * ceil(log2 k).
    """
    if not 1 <= n_active <= cfg.n_quantizers:
        raise IndexRangeError(f"n_active={n_active} outside [1, {cfg.n_quantizers}]")
    raw = cfg.c_in * cfg.t_in * cfg.sample_bits
    comp = payload_bits(n_active, cfg.c_lat, cfg.codebook_size)
    if header_bits is None:
        header_bits = 8 * (_HEAD.size + _LEN.size)
    return RateReport(n_active, raw, comp, header_bits, Fraction(cfg.window_seconds))


def raw_bitrate(sensor_count, samples, bits, seconds):
    """Uncompressed stream rate in bits per second, exact."""
    if min(sensor_count, samples, bits, seconds) <= 0:
        raise ValueError("all arguments must be positive")
    return Fraction(sensor_count * samples * bits) / Fraction(seconds)
