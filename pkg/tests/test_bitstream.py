from fractions import Fraction
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tscodec.bitstream import (
    CompressedFrame,
    compression_ratio,
    index_bits,
    pack,
    pack_bits,
    payload_bytes,
    raw_bitrate,
    read_frame_file,
    unpack,
    unpack_bits,
    write_frame_file,
)
from tscodec.errors import DigestMismatch, FormatError, IndexRangeError, ShapeError
from tscodec.model import CodecConfig


def naive_pack(values, width):
    """String-of-bits reference packer."""
    bits = "".join(format(int(v), f"0{width}b") for v in values)
    bits += "0" * (-len(bits) % 8)
    return bytes(int(bits[i:i + 8], 2) for i in range(0, len(bits), 8))


class TestPacking:
    @pytest.mark.parametrize("k,bits", [(2, 1), (3, 2), (4, 2), (5, 3), (768, 10), (1024, 10), (1025, 11)])
    def test_index_bits(self, k, bits):
        assert index_bits(k) == bits

    def test_default_payload_45_bytes(self):
        idx = np.arange(36).reshape(4, 9) * 21
        frame = pack(idx, 768)
        assert len(frame.payload) == 45 == payload_bytes(4, 9, 768)

    def test_single_quantizer_zero_payload(self):
        frame = pack(np.zeros((1, 9), dtype=int), 768)
        assert frame.payload == bytes(12)

    def test_golden_msb_first(self):
        assert pack(np.array([[1, 2]]), 4).payload == b"\x60"
        assert pack(np.array([[1]]), 768).payload == b"\x00\x40"
        assert pack(np.array([[767, 0], [1, 512]]), 768).payload == naive_pack([767, 0, 1, 512], 10)

    def test_matches_naive_packer(self, rng):
        for width in (1, 3, 7, 8, 10, 13):
            vals = rng.integers(0, 2 ** width, size=int(rng.integers(1, 40)))
            assert pack_bits(vals, width) == naive_pack(vals, width)
            assert np.array_equal(unpack_bits(naive_pack(vals, width), len(vals), width), vals)

    def test_quantizer_major_order(self):
        idx = np.array([[0, 1, 2], [3, 4, 5]])
        assert pack(idx, 8).payload == naive_pack([0, 1, 2, 3, 4, 5], 3)

    def test_index_overflow(self):
        with pytest.raises(IndexRangeError):
            pack(np.array([[768]]), 768)
        with pytest.raises(IndexRangeError):
            pack(np.array([[-1]]), 768)

    def test_bad_shapes(self):
        with pytest.raises(ShapeError):
            pack(np.zeros(9, dtype=int), 768)
        with pytest.raises(ShapeError):
            pack(np.zeros((1, 2)), 768)


@given(st.sampled_from([2, 3, 768, 1024]), st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**32 - 1),
       st.booleans())
@settings(max_examples=150, deadline=None)
def test_roundtrip_property(k, n_active, c_lat, seed, stamped):
    idx = np.random.default_rng(seed).integers(0, k, size=(n_active, c_lat))
    ts = 1.5 * seed if stamped else None
    frame = pack(idx, k, window_id=seed, timestamp=ts)
    assert len(frame.payload) == -(-n_active * c_lat * index_bits(k) // 8)
    back = CompressedFrame.from_bytes(frame.to_bytes())
    assert back == frame
    assert np.array_equal(unpack(back), idx)
    assert np.array_equal(unpack(frame.to_bytes()), idx)


class TestFrameErrors:
    def frame_bytes(self):
        return pack(np.arange(18).reshape(2, 9), 768, window_id=7).to_bytes()

    def test_bad_magic(self):
        data = self.frame_bytes()
        with pytest.raises(FormatError, match="magic"):
            CompressedFrame.from_bytes(b"XXXX" + data[4:])

    def test_version(self):
        data = bytearray(self.frame_bytes())
        data[4] = 9
        with pytest.raises(FormatError) as err:
            CompressedFrame.from_bytes(bytes(data))
        assert err.value.code == "E_VERSION"

    def test_truncated(self):
        data = self.frame_bytes()
        for cut in (3, 10, len(data) - 1):
            with pytest.raises(FormatError):
                CompressedFrame.from_bytes(data[:cut])

    def test_length_mismatch(self):
        data = bytearray(self.frame_bytes())
        struct.pack_into("<H", data, 18, 22)
        with pytest.raises(FormatError, match="payload length"):
            CompressedFrame.from_bytes(bytes(data) + b"\x00")

    def test_decoded_index_beyond_k(self):
        frame = CompressedFrame(1, 1, 5, b"\xe0")  # 3-bit value 7 with k=5
        with pytest.raises(IndexRangeError):
            unpack(frame)

    def test_trailing_garbage(self):
        with pytest.raises(FormatError, match="trailing"):
            CompressedFrame.from_bytes(self.frame_bytes() + b"\x00")


class TestFrameFile:
    def test_mixed_n_active_roundtrip(self, tmp_path, rng):
        frames = [pack(rng.integers(0, 768, size=(n, 9)), 768, window_id=i) for i, n in enumerate([1, 4, 2, 3])]
        digest = "ab" * 32
        write_frame_file(tmp_path / "f.bin", frames, digest)
        got_digest, got = read_frame_file(tmp_path / "f.bin", digest)
        assert got_digest == digest and got == frames

    def test_digest_mismatch(self, tmp_path, rng):
        write_frame_file(tmp_path / "f.bin", [pack(np.zeros((1, 9), dtype=int), 768)], "00" * 32)
        with pytest.raises(DigestMismatch):
            read_frame_file(tmp_path / "f.bin", "11" * 32)

    def test_corrupt_header(self, tmp_path):
        (tmp_path / "f.bin").write_bytes(b"TSFF\x01")
        with pytest.raises(FormatError):
            read_frame_file(tmp_path / "f.bin")
        (tmp_path / "g.bin").write_bytes(b"ABCD" + bytes(36))
        with pytest.raises(FormatError):
            read_frame_file(tmp_path / "g.bin")


class TestRates:
    @pytest.mark.parametrize("n,cr,bps", [(1, 10240, 11.25), (2, 5120, 22.5), (3, 3413, 33.75), (4, 2560, 45)])
    def test_table_defaults(self, n, cr, bps):
        rep = compression_ratio(CodecConfig(), n)
        assert rep.cr_floor == cr
        assert rep.bitrate_bps == Fraction(bps)

    def test_exact_rationals(self):
        rep = compression_ratio(CodecConfig(), 3)
        assert rep.cr == Fraction(10240, 3)
        assert rep.raw_bits == 36 * 800 * 32 and rep.compressed_bits == 270
        assert rep.effective_cr < rep.cr

    def test_out_of_range(self):
        for n in (0, 5):
            with pytest.raises(IndexRangeError):
                compression_ratio(CodecConfig(), n)

    def test_raw_bitrate(self):
        assert raw_bitrate(40, 800, 32, 8) == 128_000
        assert raw_bitrate(1, 1, 1, 1) == 1
        assert raw_bitrate(36, 800, 32, 8) == 115_200
        with pytest.raises(ValueError):
            raw_bitrate(0, 800, 32, 8)
