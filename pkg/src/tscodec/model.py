"""Encoder / decoder / discriminator graphs built from a :class:`CodecConfig`."""
from dataclasses import asdict, dataclass, field, fields
import configparser
import hashlib
import json
from fractions import Fraction

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import (
    ELU,
    ChannelLinear,
    Conv1d,
    ConvTranspose1d,
    MeanOverTime,
    PReLU,
    ResidualUnit,
    Sequential,
    infer_shapes,
)


@dataclass
class CodecConfig:
    c_in: int = 36
    t_in: int = 800
    c_lat: int = 9
    l_lat: int = 100
    # widths entering/leaving each encoder block; len == encoder blocks + 1
    encoder_channels: tuple = (36, 27, 18, 12, 9)
    strides: tuple = (2, 2, 2, 1)
    encoder_kernel: int = 5
    residual_kernel: int = 3
    outer_kernel: int = 7
    encoder_residual_units: int = 1
    # decoder: conv -> blocks "a" -> channel-linear -> blocks "b" -> conv
    decoder_channels_a: tuple = (192, 192)
    decoder_strides_a: tuple = (1, 1)
    decoder_channels_b: tuple = (128, 64, 48, 32)
    decoder_strides_b: tuple = (1, 2, 2, 2)
    decoder_residual_units: int = 3
    prelu_per_channel: bool = True
    elu_alpha: float = 1.0
    disc_channels: int = 16
    disc_layers: int = 4
    disc_stride: int = 4
    n_quantizers: int = 4
    codebook_size: int = 768
    sample_bits: int = 32
    window_seconds: float = 8.0
    eval_span: int = 512

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                setattr(self, f.name, tuple(v))

    @property
    def encoder_blocks(self):
        return len(self.encoder_channels) - 1

    @property
    def native_cr(self):
        return Fraction(self.c_in * self.t_in, self.c_lat * self.l_lat)

    @property
    def index_bits(self):
        return max(1, (self.codebook_size - 1).bit_length())

    def validate(self):
        positive = ["c_in", "t_in", "c_lat", "l_lat", "encoder_kernel", "residual_kernel",
                    "outer_kernel", "n_quantizers", "sample_bits", "disc_channels", "disc_layers"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be at least 2")
        if self.window_seconds <= 0:
            raise ConfigError("window_seconds must be positive")
        if len(self.strides) != self.encoder_blocks:
            raise ConfigError(f"{len(self.strides)} strides for {self.encoder_blocks} encoder blocks")
        if len(self.decoder_strides_a) != len(self.decoder_channels_a) or \
                len(self.decoder_strides_b) != len(self.decoder_channels_b):
            raise ConfigError("decoder strides and channel lists differ in length")
        if any(s < 1 for s in (*self.strides, *self.decoder_strides_a, *self.decoder_strides_b)):
            raise ConfigError("strides must be >= 1")
        if self.encoder_residual_units < 0 or self.decoder_residual_units < 0:
            raise ConfigError("residual unit counts must be >= 0")
        down = int(np.prod(self.strides))
        if self.t_in % down or self.t_in // down != self.l_lat:
            raise ConfigError(f"t_in / prod(strides) = {self.t_in}/{down} does not equal l_lat={self.l_lat}")
        up = int(np.prod(self.decoder_strides_a)) * int(np.prod(self.decoder_strides_b))
        if self.l_lat * up != self.t_in:
            raise ConfigError(f"decoder upsampling x{up} maps {self.l_lat} to {self.l_lat * up}, not t_in={self.t_in}")
        if self.eval_span > self.t_in:
            raise ConfigError(f"eval_span {self.eval_span} exceeds t_in {self.t_in}")
        return self

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown codec config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _parse_value(raw, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.replace(",", " ").split())
    return type(default)(raw)


def parse_sections(text):
    """Parse INI text into ``{section: {key: raw string}}`` (keys lower-cased)."""
    cp = configparser.ConfigParser()
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"unparsable config: {exc}".splitlines()[0]) from None
    return {s: dict(cp[s]) for s in cp.sections()}


def coerce_section(cls, values):
    """Build dataclass ``cls`` from raw strings, typed after its defaults."""
    defaults = cls()
    kwargs = {}
    for key, raw in values.items():
        if not hasattr(defaults, key):
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        try:
            kwargs[key] = _parse_value(raw, getattr(defaults, key))
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return cls(**kwargs)


def load_codec_config(path):
    """Read the ``[codec]`` section of an INI-style config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            sections = parse_sections(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return coerce_section(CodecConfig, sections.get("codec", {})).validate()


# -- graphs -----------------------------------------------------------------

def _prelu(channels, cfg):
    return PReLU(channels if cfg.prelu_per_channel else 1)


class EncoderBlock(Sequential):
    def __init__(self, cin, cout, stride, cfg, rng):
        parts = [(f"res{i}", ResidualUnit(cin, cfg.residual_kernel, _prelu(cin, cfg), rng))
                 for i in range(cfg.encoder_residual_units)]
        parts.append(("conv", Conv1d(cin, cout, cfg.encoder_kernel, stride, rng=rng, name="enc.conv")))
        parts.append(("act", _prelu(cout, cfg)))
        super().__init__(*parts)


def _tconv_geometry(stride):
    if stride == 1:
        return 3, 1
    return 2 * stride, stride // 2


class DecoderBlock(Sequential):
    def __init__(self, cin, cout, stride, cfg, rng):
        kernel, padding = _tconv_geometry(stride)
        parts = [("tconv", ConvTranspose1d(cin, cout, kernel, stride, padding, rng=rng, name="dec.tconv")),
                 ("act", ELU(cfg.elu_alpha))]
        parts += [(f"res{i}", ResidualUnit(cout, cfg.residual_kernel, ELU(cfg.elu_alpha), rng))
                  for i in range(cfg.decoder_residual_units)]
        super().__init__(*parts)


class Encoder(Sequential):
    """``(N, c_in, t_in) -> (N, c_lat, l_lat)``"""

    def __init__(self, cfg, rng):
        ch = cfg.encoder_channels
        parts = [("conv_in", Conv1d(cfg.c_in, ch[0], cfg.outer_kernel, rng=rng, name="enc.conv_in"))]
        for i, stride in enumerate(cfg.strides):
            parts.append((f"block{i}", EncoderBlock(ch[i], ch[i + 1], stride, cfg, rng)))
        parts.append(("conv_out", Conv1d(ch[-1], cfg.c_lat, 3, rng=rng, name="enc.conv_out")))
        super().__init__(*parts)
        self.cfg = cfg


class Decoder(Sequential):
    """``(N, c_lat, l_lat) -> (N, c_in, t_in)``"""

    def __init__(self, cfg, rng):
        a, b = cfg.decoder_channels_a, cfg.decoder_channels_b
        parts = [("linear_in", ChannelLinear(cfg.c_lat, cfg.l_lat)),
                 ("conv_in", Conv1d(cfg.c_lat, a[0], cfg.outer_kernel, rng=rng, name="dec.conv_in"))]
        width = a[0]
        for i, (cout, stride) in enumerate(zip(a, cfg.decoder_strides_a)):
            parts.append((f"block_a{i}", DecoderBlock(width, cout, stride, cfg, rng)))
            width = cout
        mid_len = cfg.l_lat * int(np.prod(cfg.decoder_strides_a))
        parts.append(("linear_mid", ChannelLinear(width, mid_len)))
        for i, (cout, stride) in enumerate(zip(b, cfg.decoder_strides_b)):
            parts.append((f"block_b{i}", DecoderBlock(width, cout, stride, cfg, rng)))
            width = cout
        parts.append(("conv_out", Conv1d(width, cfg.c_in, cfg.outer_kernel, rng=rng, name="dec.conv_out")))
        super().__init__(*parts)
        self.cfg = cfg


class Discriminator(Sequential):
    """Strided conv stack with PReLU; one logit per window, ``(N, c_in, t_in) -> (N,)``."""

    def __init__(self, cfg, rng):
        parts = []
        width = cfg.c_in
        for i in range(cfg.disc_layers):
            last = i == cfg.disc_layers - 1
            cout = 1 if last else cfg.disc_channels
            parts.append((f"conv{i}", Conv1d(width, cout, 5, cfg.disc_stride, padding=2, rng=rng, name=f"disc.conv{i}")))
            if not last:
                parts.append((f"act{i}", _prelu(cout, cfg)))
            width = cout
        parts.append(("pool", MeanOverTime()))
        super().__init__(*parts)
        self.cfg = cfg

    def forward(self, x):
        _check_window(x, self.cfg, "discriminator")
        return super().forward(x)[:, 0]

    def backward(self, grad_out):
        return super().backward(grad_out[:, None])


def _check_window(x, cfg, what):
    if x.ndim != 3 or x.shape[1:] != (cfg.c_in, cfg.t_in):
        raise ShapeError(f"{what}: expected (N, {cfg.c_in}, {cfg.t_in}), got {x.shape}")


def build_codec(cfg, seed=0):
    """Validate ``cfg`` and return ``(encoder, decoder)`` with fresh weights."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    enc = Encoder(cfg, rng)
    dec = Decoder(cfg, rng)
    try:
        lat = infer_shapes(list(enc.layer_specs()), cfg.c_in, cfg.t_in)
        out = infer_shapes(list(dec.layer_specs()), cfg.c_lat, cfg.l_lat)
    except ShapeError as exc:
        raise ConfigError(f"inconsistent layer geometry: {exc}") from None
    if lat != (cfg.c_lat, cfg.l_lat):
        raise ConfigError(f"encoder produces {lat}, expected {(cfg.c_lat, cfg.l_lat)}")
    if out != (cfg.c_in, cfg.t_in):
        raise ConfigError(f"decoder produces {out}, expected {(cfg.c_in, cfg.t_in)}")
    return enc, dec


def build_discriminator(cfg, seed=1):
    return Discriminator(cfg, np.random.default_rng(seed))


def _batched(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 2 else (x, False)


def encode(enc, window):
    """Map one window ``(c_in, t_in)`` or a batch ``(N, c_in, t_in)`` to latents."""
    x, single = _batched(window)
    _check_window(x, enc.cfg, "encode")
    z = enc.forward(x)
    return z[0] if single else z


def decode(dec, latent):
    z, single = _batched(latent)
    cfg = dec.cfg
    if z.ndim != 3 or z.shape[1:] != (cfg.c_lat, cfg.l_lat):
        raise ShapeError(f"decode: expected (N, {cfg.c_lat}, {cfg.l_lat}), got {z.shape}")
    x = dec.forward(z)
    return x[0] if single else x


def discriminate(disc, window):
    x, single = _batched(window)
    g = disc.forward(x)
    return g[0] if single else g


@dataclass
class Normalizer:
    """Per-channel z-score with training-set statistics."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    std: np.ndarray = field(default_factory=lambda: np.ones(1))

    @classmethod
    def fit(cls, windows, floor=1e-8):
        windows = np.asarray(windows, dtype=np.float64)
        mean = windows.mean(axis=(0, 2))
        std = windows.std(axis=(0, 2))
        scale = max(float(np.abs(windows).max()), 1.0)
        std = np.maximum(std, floor * scale)
        return cls(mean, std)

    @classmethod
    def identity(cls, channels):
        return cls(np.zeros(channels), np.ones(channels))

    def apply(self, x):
        return (x - self.mean[:, None]) / self.std[:, None]

    def invert(self, x):
        return x * self.std[:, None] + self.mean[:, None]
