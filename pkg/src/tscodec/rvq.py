"""Residual vector quantization.

Each latent channel (a vector of length ``dim``) is quantized independently by
a cascade of codebooks; stage ``q`` quantizes what stages ``< q`` left over.
Nearest-codeword search uses squared Euclidean distance with ties going to
the lowest index, so sequential and range-partitioned parallel searches agree
exactly.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging
import struct
import warnings
import zlib

import numpy as np

from .errors import EmptyDataset, FormatError, IndexRangeError, ShapeError

log = logging.getLogger(__name__)

# bound on the (rows, codewords, dim) temporary used for distances
_CHUNK_ELEMENTS = 1 << 22


@dataclass
class CodebookStack:
    entries: np.ndarray  # (N_q, k, dim)
    usage: np.ndarray = None  # (N_q, k) hit counters

    def __post_init__(self):
        self.entries = np.asarray(self.entries)
        if self.entries.ndim != 3:
            raise ShapeError(f"codebook stack must be (N_q, k, dim), got {self.entries.shape}")
        if self.usage is None:
            self.usage = np.zeros(self.entries.shape[:2], dtype=np.int64)

    @property
    def n_quantizers(self):
        return self.entries.shape[0]

    @property
    def k(self):
        return self.entries.shape[1]

    @property
    def dim(self):
        return self.entries.shape[2]

    def utilization(self):
        """Fraction of codewords hit at least once, per quantizer."""
        return (self.usage > 0).mean(axis=1)

    def storage_bytes(self, bytes_per_value=4):
        return self.entries.size * bytes_per_value

    def copy(self):
        return CodebookStack(self.entries.copy(), self.usage.copy())


def squared_distances(vectors, codewords):
    """``(M, dim) x (k, dim) -> (M, k)``; each entry depends only on its own pair."""
    m, dim = vectors.shape
    out = np.empty((m, codewords.shape[0]), dtype=np.result_type(vectors, codewords))
    rows = max(1, _CHUNK_ELEMENTS // max(1, codewords.shape[0] * dim))
    for i in range(0, m, rows):
        diff = vectors[i:i + rows, None, :] - codewords[None, :, :]
        out[i:i + rows] = (diff * diff).sum(axis=-1)
    return out


def _gram_distances(vectors, codewords):
    # matmul form: fast, but not bit-stable across chunkings; clustering only
    d = (vectors * vectors).sum(axis=1)[:, None] - 2.0 * (vectors @ codewords.T) + (codewords * codewords).sum(axis=1)
    return np.maximum(d, 0.0)


def _as_rows(x, dim):
    x = np.asarray(x)
    single = x.ndim == 1
    rows = x[None] if single else x
    if rows.ndim != 2 or rows.shape[1] != dim:
        raise ShapeError(f"vector dimension {x.shape[-1] if x.ndim else 0} != codebook dimension {dim}")
    return rows, single


def vq_nearest(x, codebook):
    """Nearest codeword of ``codebook`` ``(k, dim)`` for ``x`` ``(dim,)`` or ``(M, dim)``."""
    codebook = np.asarray(codebook)
    rows, single = _as_rows(x, codebook.shape[1])
    idx = squared_distances(rows, codebook).argmin(axis=1)
    if single:
        return int(idx[0]), codebook[idx[0]]
    return idx, codebook[idx]


_pools = {}


def _pool(n_workers):
    pool = _pools.get(n_workers)
    if pool is None:
        pool = _pools[n_workers] = ThreadPoolExecutor(max_workers=n_workers, thread_name_prefix="pvq")
    return pool


def _scan_range(rows, codebook, start, end):
    d = squared_distances(rows, codebook[start:end])
    local = d.argmin(axis=1)
    return start + local, d[np.arange(len(rows)), local]


def vq_nearest_parallel(x, codebook, n_workers=1):
    """Same result as :func:`vq_nearest`, scanning disjoint codeword ranges concurrently.

    Worker ``w`` covers ``[start_w, end_w)``; the reduce walks workers in range
    order and only replaces the best on a strictly smaller distance, which
    keeps the lowest-index tie rule.
    """
    if n_workers < 1:
        raise ValueError("n_workers must be >= 1")
    codebook = np.asarray(codebook)
    rows, single = _as_rows(x, codebook.shape[1])
    k = codebook.shape[0]
    bounds = np.linspace(0, k, min(n_workers, k) + 1).astype(int)
    ranges = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(ranges) == 1:
        results = [_scan_range(rows, codebook, 0, k)]
    else:
        pool = _pool(len(ranges))
        results = list(pool.map(lambda r: _scan_range(rows, codebook, *r), ranges))
    best_idx, best_dist = results[0]
    best_idx, best_dist = best_idx.copy(), best_dist.copy()
    for idx, dist in results[1:]:
        better = dist < best_dist
        best_idx[better] = idx[better]
        best_dist[better] = dist[better]
    if single:
        return int(best_idx[0]), codebook[best_idx[0]]
    return best_idx, codebook[best_idx]


def _nearest(rows, codebook, n_workers):
    if n_workers > 1:
        return vq_nearest_parallel(rows, codebook, n_workers)
    return vq_nearest(rows, codebook)


def cascade(vectors, stack, n_stages, n_workers=1):
    """Run the greedy cascade on ``(M, dim)`` vectors.

    Returns ``(indices (n_stages, M), partial_sums, stage_inputs)`` where
    ``partial_sums[q]`` is the reconstruction after ``q + 1`` stages and
    ``stage_inputs[q]`` the residual fed to stage ``q``.
    """
    residual = vectors
    xhat = np.zeros_like(vectors)
    indices = np.empty((n_stages, len(vectors)), dtype=np.int64)
    partial, inputs = [], []
    for q in range(n_stages):
        inputs.append(residual)
        idx, cw = _nearest(residual, stack.entries[q], n_workers)
        indices[q] = idx
        xhat = xhat + cw
        residual = residual - cw
        partial.append(xhat)
    return indices, partial, inputs


def _check_active(n_active, stack):
    if not 1 <= n_active <= stack.n_quantizers:
        raise IndexRangeError(f"n_active={n_active} outside [1, {stack.n_quantizers}]")


def rvq_quantize(z, stack, n_active=None, n_workers=1):
    """Quantize latents ``(c_lat, dim)`` or ``(N, c_lat, dim)``.

    Returns ``(indices, z_quantized)``; indices are ``(n_active, c_lat)``
    (or ``(N, n_active, c_lat)``), quantizer-major.
    """
    n_active = stack.n_quantizers if n_active is None else n_active
    _check_active(n_active, stack)
    z = np.asarray(z)
    single = z.ndim == 2
    zb = z[None] if single else z
    if zb.ndim != 3 or zb.shape[2] != stack.dim:
        raise ShapeError(f"latent shape {z.shape} incompatible with codebook dimension {stack.dim}")
    n, c, dim = zb.shape
    indices, partial, _ = cascade(zb.reshape(n * c, dim), stack, n_active, n_workers)
    zq = partial[-1].reshape(n, c, dim)
    idx = indices.reshape(n_active, n, c).transpose(1, 0, 2)
    return (idx[0], zq[0]) if single else (np.ascontiguousarray(idx), zq)


def rvq_dequantize(indices, stack):
    """Sum the indexed codewords; inverse of the index half of :func:`rvq_quantize`."""
    indices = np.asarray(indices)
    single = indices.ndim == 2
    ib = indices[None] if single else indices
    if ib.ndim != 3:
        raise ShapeError(f"index matrix must be (n_active, c_lat), got {indices.shape}")
    n_active = ib.shape[1]
    _check_active(n_active, stack)
    if ib.size and (ib.min() < 0 or ib.max() >= stack.k):
        raise IndexRangeError(f"index out of range [0, {stack.k})")
    out = np.zeros((ib.shape[0], ib.shape[2], stack.dim), dtype=stack.entries.dtype)
    for q in range(n_active):
        out = out + stack.entries[q][ib[:, q, :]]
    return out[0] if single else out


def record_usage(stack, indices):
    """Add hit counts from an index array shaped (..., n_active, c_lat)."""
    indices = np.asarray(indices)
    ib = indices.reshape(-1, *indices.shape[-2:])
    for q in range(ib.shape[1]):
        stack.usage[q] += np.bincount(ib[:, q, :].ravel(), minlength=stack.k)


def commitment_loss(z, zq):
    z, zq = np.asarray(z), np.asarray(zq)
    if z.shape != zq.shape:
        raise ShapeError(f"commitment loss shapes differ: {z.shape} vs {zq.shape}")
    d = z - zq
    return float(np.mean(d * d))


def commitment_loss_grad(z, zq):
    """Gradient w.r.t. ``z`` with the quantized latent held constant."""
    return 2.0 * (z - zq) / z.size


# -- codebook learning -----------------------------------------------------

def kmeans_pp(data, k, rng):
    """k-means++ seeding.  Already-chosen points have zero weight, so with at
    least ``k`` distinct points the seeds are distinct."""
    n = len(data)
    centers = np.empty((k, data.shape[1]), dtype=data.dtype)
    first = int(rng.integers(n))
    centers[0] = data[first]
    closest = _gram_distances(data, centers[:1])[:, 0]
    for i in range(1, k):
        total = closest.sum()
        if total <= 0:
            # fewer distinct points than k
            pick = int(rng.integers(n))
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centers[i] = data[pick]
        closest = np.minimum(closest, _gram_distances(data, centers[i:i + 1])[:, 0])
    return centers


def _jitter_duplicates(centers, scale, rng):
    _, first = np.unique(centers, axis=0, return_index=True)
    dup = np.setdiff1d(np.arange(len(centers)), first)
    if len(dup):
        centers[dup] += rng.normal(0.0, scale, size=centers[dup].shape)
    return centers


def lloyd(data, centers, iters, rng):
    """Plain Lloyd iterations; an emptied cluster takes the worst-fit point."""
    for _ in range(iters):
        d = _gram_distances(data, centers)
        assign = d.argmin(axis=1)
        err = d[np.arange(len(data)), assign]
        counts = np.bincount(assign, minlength=len(centers))
        sums = np.zeros_like(centers)
        np.add.at(sums, assign, data)
        new = centers.copy()
        live = counts > 0
        new[live] = sums[live] / counts[live, None]
        dead = np.flatnonzero(~live)
        if len(dead):
            worst = np.argsort(err, kind="stable")[::-1][:len(dead)]
            new[dead[:len(worst)]] = data[worst]
        if np.array_equal(new, centers):
            break
        centers = new
    return centers


def train_codebooks(latents, n_quantizers, k, seed=0, iters=25):
    """Fit a codebook stack greedily: k-means++ then Lloyd per stage on residuals.

    ``latents`` is ``(..., dim)``; every trailing vector is one training sample.
    Usage counters of the returned stack reflect the training set.
    """
    latents = np.asarray(latents, dtype=np.float64)
    if latents.size == 0:
        raise EmptyDataset("no latents to train codebooks on")
    data = latents.reshape(-1, latents.shape[-1])
    rng = np.random.default_rng(seed)
    scale = float(np.abs(data).max()) or 1.0
    if np.all(data == data[0]):
        warnings.warn("all training latents are identical; jittering codebook init", RuntimeWarning)
    entries = np.empty((n_quantizers, k, data.shape[1]))
    residual = data
    for q in range(n_quantizers):
        centers = kmeans_pp(residual, k, rng)
        centers = _jitter_duplicates(centers, 1e-3 * scale, rng)
        entries[q] = lloyd(residual, centers, iters, rng)
        idx, cw = vq_nearest(residual, entries[q])
        residual = residual - cw
    stack = CodebookStack(entries)
    idx, _, _ = cascade(data, stack, n_quantizers)
    record_usage(stack, idx.T[:, :, None])
    return stack


def residual_profile(latents, stack, n_workers=1):
    """Mean residual norm after each stage (non-increasing in practice)."""
    latents = np.asarray(latents)
    data = latents.reshape(-1, stack.dim)
    _, partial, _ = cascade(data, stack, stack.n_quantizers, n_workers)
    return [float(np.linalg.norm(data - p, axis=1).mean()) for p in partial]


@dataclass
class CodebookEMA:
    """Exponential-moving-average codebook updates with dead-codeword reseeding."""

    decay: float = 0.99
    eps: float = 1e-5
    cluster_size: np.ndarray = None  # (N_q, k)
    embed_sum: np.ndarray = None  # (N_q, k, dim)
    epoch_usage: np.ndarray = None  # (N_q, k)
    reservoir: np.ndarray = None  # (N_q, R, dim) recent stage inputs
    reservoir_size: int = 1024

    @classmethod
    def start(cls, stack, decay=0.99, eps=1e-5, reservoir_size=1024):
        nq, k, dim = stack.entries.shape
        return cls(decay, eps, np.ones((nq, k)), stack.entries.astype(np.float64).copy(),
                   np.zeros((nq, k), dtype=np.int64), np.zeros((nq, 0, dim)), reservoir_size)

    def update(self, stack, stage_inputs, indices):
        """One EMA step per stage from a batch's stage inputs ``(M, dim)`` and indices ``(N_q, M)``."""
        nq, k, dim = stack.entries.shape
        keep = []
        for q in range(nq):
            vecs, idx = stage_inputs[q], indices[q]
            counts = np.bincount(idx, minlength=k)
            sums = np.zeros((k, dim))
            np.add.at(sums, idx, vecs)
            self.cluster_size[q] = self.decay * self.cluster_size[q] + (1 - self.decay) * counts
            self.embed_sum[q] = self.decay * self.embed_sum[q] + (1 - self.decay) * sums
            n = self.cluster_size[q].sum()
            smoothed = (self.cluster_size[q] + self.eps) / (n + k * self.eps) * n
            stack.entries[q] = self.embed_sum[q] / smoothed[:, None]
            self.epoch_usage[q] += counts
            keep.append(np.concatenate([self.reservoir[q], vecs])[-self.reservoir_size:])
        self.reservoir = np.stack(keep)

    def end_epoch(self, stack, rng):
        """Reseed codewords unused this epoch from high-error residuals.

        The epoch's hit counts become ``stack.usage``.  Returns the number of
        reseeded codewords.
        """
        stack.usage = self.epoch_usage.copy()
        reseeded = 0
        for q in range(stack.n_quantizers):
            dead = np.flatnonzero(self.epoch_usage[q] < 1)
            pool = self.reservoir[q]
            if len(dead) and len(pool):
                err = _gram_distances(pool, stack.entries[q]).min(axis=1)
                top = np.argsort(err, kind="stable")[::-1][:max(len(dead), len(pool) // 2)]
                pick = pool[rng.choice(top, size=len(dead), replace=len(top) < len(dead))]
                stack.entries[q, dead] = pick
                self.embed_sum[q, dead] = pick
                self.cluster_size[q, dead] = 1.0
                reseeded += len(dead)
        self.epoch_usage[...] = 0
        return reseeded


# -- codebook file ---------------------------------------------------------

CODEBOOK_MAGIC = b"TSCB"
CODEBOOK_VERSION = 1
_CB_PRECISION = {"f8": (0, "<f8"), "f4": (1, "<f4"), "f2": (2, "<f2")}
CODEBOOK_HEADER = struct.Struct("<4sHBBIII")


def codebooks_to_bytes(stack, precision="f4"):
    """Header ``(magic, version, precision, reserved, N_q, k, dim)`` + entries + crc32."""
    code, dtype = _CB_PRECISION[precision]
    nq, k, dim = stack.entries.shape
    body = CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, code, 0, nq, k, dim)
    body += np.ascontiguousarray(stack.entries, dtype=dtype).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def codebooks_from_bytes(data):
    data = bytes(data)
    if len(data) < CODEBOOK_HEADER.size:
        raise FormatError("truncated codebook file header")
    magic, version, code, _, nq, k, dim = CODEBOOK_HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"bad codebook magic {magic!r}")
    if version != CODEBOOK_VERSION:
        raise FormatError(f"codebook version {version} unsupported", code="E_VERSION")
    dtypes = {c: np.dtype(d) for c, d in _CB_PRECISION.values()}
    if code not in dtypes:
        raise FormatError(f"unknown codebook precision code {code}")
    nbytes = nq * k * dim * dtypes[code].itemsize
    expected = CODEBOOK_HEADER.size + nbytes + 4
    if len(data) != expected:
        raise FormatError(f"codebook file is {len(data)} bytes, expected {expected}")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[:expected - 4]) != crc:
        raise FormatError("codebook checksum mismatch")
    entries = np.frombuffer(data, dtype=dtypes[code], count=nq * k * dim, offset=CODEBOOK_HEADER.size)
    return CodebookStack(entries.reshape(nq, k, dim).astype(np.float64))


def save_codebooks(stack, path, precision="f4"):
    data = codebooks_to_bytes(stack, precision)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load_codebooks(path):
    with open(path, "rb") as fh:
        return codebooks_from_bytes(fh.read())
