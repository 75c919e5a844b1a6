"""Window datasets: binary and delimited-text formats, plus a synthetic generator.

Binary layout (little-endian)::

    magic b"TSDS" | u16 version=1 | u8 dtype (0=f8, 1=f4) | u8 0
    | u32 n_windows | u32 channels | u32 length | values | u32 crc32

Values are stored window by window, channel-major, time-minor.

Text layout: optional ``# shape=<channels>x<length>`` comment line, then one
window per line as ``channels * length`` comma-separated numbers in the same
order.  Blank lines and other ``#`` lines are ignored.
"""
import struct
import zlib

import numpy as np

from ..errors import EmptyDataset, FormatError, ShapeError

MAGIC = b"TSDS"
VERSION = 1
_HEAD = struct.Struct("<4sHBBIII")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def save_binary(path, windows, dtype="f8"):
    windows = np.asarray(windows)
    if windows.ndim != 3:
        raise ShapeError(f"windows must be (N, C, T), got {windows.shape}")
    code = {"f8": 0, "f4": 1}[dtype]
    body = _HEAD.pack(MAGIC, VERSION, code, 0, *windows.shape)
    body += np.ascontiguousarray(windows, dtype=_DTYPES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(body + struct.pack("<I", zlib.crc32(body)))


def load_binary(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _HEAD.size + 4:
        raise FormatError("truncated dataset file")
    magic, version, code, _, n, c, t = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad dataset magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"dataset version {version} unsupported", code="E_VERSION")
    if code not in _DTYPES:
        raise FormatError(f"unknown dataset dtype code {code}")
    expected = _HEAD.size + n * c * t * _DTYPES[code].itemsize + 4
    if len(data) != expected:
        raise FormatError(f"dataset file is {len(data)} bytes, header implies {expected}")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[:expected - 4]) != crc:
        raise FormatError("dataset checksum mismatch")
    arr = np.frombuffer(data, dtype=_DTYPES[code], count=n * c * t, offset=_HEAD.size)
    return arr.reshape(n, c, t).astype(np.float64)


def save_text(path, windows):
    windows = np.asarray(windows)
    n, c, t = windows.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# shape={c}x{t}\n")
        for w in windows:
            fh.write(",".join(repr(float(v)) for v in w.ravel()) + "\n")


def load_text(path, shape=None):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line[1:].strip().startswith("shape="):
                    c, t = line.split("=", 1)[1].lower().split("x")
                    shape = (int(c), int(t))
                continue
            try:
                rows.append([float(v) for v in line.split(",")])
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric value") from None
            if shape is not None and len(rows[-1]) != shape[0] * shape[1]:
                raise FormatError(f"{path}:{lineno}: {len(rows[-1])} values, expected {shape[0] * shape[1]}")
    if shape is None:
        raise FormatError(f"{path}: no '# shape=CxT' line and no shape given")
    if not rows:
        return np.zeros((0, *shape))
    return np.asarray(rows).reshape(len(rows), *shape)


def load_windows(path, shape=None):
    """Dispatch on content: binary magic, else delimited text."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    windows = load_binary(path) if head == MAGIC else load_text(path, shape)
    if len(windows) == 0:
        raise EmptyDataset(f"{path}: no windows")
    if not np.all(np.isfinite(windows)):
        raise FormatError(f"{path}: non-finite values")
    if shape is not None and windows.shape[1:] != tuple(shape):
        raise ShapeError(f"{path}: windows are {windows.shape[1:]}, model expects {tuple(shape)}")
    return windows


def synthetic_windows(n_windows, channels=36, length=800, seed=0, n_sources=3,
                      sample_rate=100.0, noise=0.05, world_seed=1234):
    """Multi-sine windows with a shared low-rank structure.

    ``world_seed`` fixes the sensor layout (source frequencies, mixing matrix,
    per-channel offsets) so different ``seed`` values draw fresh windows from
    the same process.  Each window draws per-source amplitude, phase and a
    small frequency jitter, then adds white noise.
    """
    world = np.random.default_rng(world_seed)
    base_freq = world.uniform(0.3, 2.5, size=n_sources)
    mixing = world.normal(0.0, 1.0 / np.sqrt(n_sources), size=(channels, n_sources))
    offset = world.uniform(1.5, 2.5, size=channels)

    rng = np.random.default_rng(seed)
    t = np.arange(length) / sample_rate
    amp = rng.uniform(0.5, 1.5, size=(n_windows, n_sources))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n_windows, n_sources))
    freq = base_freq * rng.uniform(0.9, 1.1, size=(n_windows, n_sources))
    sources = amp[:, :, None] * np.sin(2 * np.pi * freq[:, :, None] * t + phase[:, :, None])
    windows = np.einsum("cs,nst->nct", mixing, sources) + offset[None, :, None]
    return windows + rng.normal(0.0, noise, size=windows.shape)
