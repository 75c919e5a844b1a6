"""The deployable artifact: config + weights + codebooks + normalization.

A bundle file is a tensor archive (see :mod:`tscodec.nn.serialize`) whose
metadata holds the codec config and format versions.  Encoder and decoder
weights and the normalization statistics are stored as named tensors; the
codebook stack is embedded verbatim as a codebook file under
``codebooks.file``.  The SHA-256 of the bundle bytes is its digest.
"""
import hashlib

import numpy as np

from . import bitstream
from .errors import FormatError
from .model import CodecConfig, Normalizer, build_codec, decode, encode
from .nn import serialize
from .rvq import CodebookStack, codebooks_from_bytes, codebooks_to_bytes, rvq_dequantize, rvq_quantize

BUNDLE_KIND = "tscodec-bundle"
BUNDLE_VERSION = 1

# windows pushed through the networks at once
_EVAL_CHUNK = 32


class Codec:
    def __init__(self, config, encoder, decoder, stack, normalizer, digest=None):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder
        self.stack = stack
        self.normalizer = normalizer
        self.digest = digest

    def latents(self, windows):
        windows = np.asarray(windows, dtype=np.float64)
        out = [encode(self.encoder, self.normalizer.apply(windows[i:i + _EVAL_CHUNK]))
               for i in range(0, len(windows), _EVAL_CHUNK)]
        return np.concatenate(out)

    def quantize(self, windows, n_active, n_workers=1):
        """Raw windows ``(N, c_in, t_in)`` -> index matrices ``(N, n_active, c_lat)``."""
        idx, _ = rvq_quantize(self.latents(windows), self.stack, n_active, n_workers)
        return idx

    def reconstruct_from_indices(self, indices):
        zq = rvq_dequantize(indices, self.stack)
        single = zq.ndim == 2
        zq = zq[None] if single else zq
        out = np.concatenate([self.normalizer.invert(decode(self.decoder, zq[i:i + _EVAL_CHUNK]))
                              for i in range(0, len(zq), _EVAL_CHUNK)])
        return out[0] if single else out

    def reconstruct(self, windows, n_active, n_workers=1):
        return self.reconstruct_from_indices(self.quantize(windows, n_active, n_workers))

    def compress(self, windows, n_active, n_workers=1, first_id=0):
        idx = self.quantize(windows, n_active, n_workers)
        return [bitstream.pack(m, self.stack.k, window_id=first_id + i) for i, m in enumerate(idx)]

    def to_bytes(self):
        cfg = self.config
        tensors = {f"encoder.{k}": v for k, v in self.encoder.state_dict().items()}
        tensors.update({f"decoder.{k}": v for k, v in self.decoder.state_dict().items()})
        tensors["norm.mean"] = self.normalizer.mean
        tensors["norm.std"] = self.normalizer.std
        tensors["codebooks.usage"] = self.stack.usage
        tensors["codebooks.file"] = np.frombuffer(codebooks_to_bytes(self.stack, "f4"), dtype=np.uint8)
        meta = {
            "kind": BUNDLE_KIND,
            "bundle_version": BUNDLE_VERSION,
            "codec": cfg.to_dict(),
            "formats": {
                "archive": serialize.ARCHIVE_VERSION,
                "frame": bitstream.FRAME_VERSION,
                "frame_file": bitstream.FILE_VERSION,
            },
            "params": {"encoder": self.encoder.num_params(), "decoder": self.decoder.num_params()},
        }
        return serialize.dumps(tensors, "train", meta)

    @classmethod
    def from_bytes(cls, data):
        tensors, meta, _ = serialize.loads(data)
        if meta.get("kind") != BUNDLE_KIND:
            raise FormatError("not a codec bundle")
        if meta.get("bundle_version") != BUNDLE_VERSION:
            raise FormatError(f"bundle version {meta.get('bundle_version')} unsupported", code="E_VERSION")
        cfg = CodecConfig.from_dict(meta["codec"]).validate()
        enc, dec = build_codec(cfg)
        enc.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")})
        dec.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("decoder.")})
        stack = codebooks_from_bytes(tensors["codebooks.file"].tobytes())
        stack.usage = np.array(tensors["codebooks.usage"], dtype=np.int64)
        if stack.entries.shape != (cfg.n_quantizers, cfg.codebook_size, cfg.l_lat):
            raise FormatError(f"codebook stack {stack.entries.shape} does not match config")
        norm = Normalizer(np.array(tensors["norm.mean"]), np.array(tensors["norm.std"]))
        return cls(cfg, enc, dec, stack, norm, hashlib.sha256(bytes(data)).hexdigest())

    def save(self, path):
        data = self.to_bytes()
        with open(path, "wb") as fh:
            fh.write(data)
        self.digest = hashlib.sha256(data).hexdigest()
        return self.digest

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def untrained_codec(cfg, seed=0):
    """Freshly initialised codec with random codebooks; handy for smoke tests."""
    enc, dec = build_codec(cfg, seed)
    rng = np.random.default_rng(seed)
    entries = rng.normal(0.0, 0.1, size=(cfg.n_quantizers, cfg.codebook_size, cfg.l_lat))
    return Codec(cfg, enc, dec, CodebookStack(entries), Normalizer.identity(cfg.c_in))
