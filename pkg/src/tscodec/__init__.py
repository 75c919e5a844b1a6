"""Lossy neural compression of multi-channel time-series windows with a
residual vector quantizer and a run-time selectable bitrate."""
from .bitstream import CompressedFrame, compression_ratio, pack, raw_bitrate, unpack
from .bundle import Codec
from .model import CodecConfig, build_codec, build_discriminator, decode, encode
from .rvq import CodebookStack, rvq_dequantize, rvq_quantize, vq_nearest, vq_nearest_parallel

__version__ = "0.1.0"
