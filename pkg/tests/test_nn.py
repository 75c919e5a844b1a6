import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tscodec.errors import FormatError, ShapeError
from tscodec.nn import (
    ELU,
    ChannelLinear,
    Conv1d,
    ConvTranspose1d,
    LayerSpec,
    PReLU,
    ResidualUnit,
    Sequential,
    channel_linear_forward,
    conv1d_backward,
    conv1d_forward,
    conv1d_out_len,
    dumps,
    elu_forward,
    infer_shapes,
    load_weights,
    loads,
    prelu_forward,
    save_weights,
    tconv1d_forward,
)

from fdcheck import max_rel_error, numeric_grad

TOL = 1e-4


def check_layer_grads(layer, x, rng):
    """Backward of ``sum(w * layer(x))`` vs finite differences, input and params."""
    w = rng.standard_normal(layer.forward(x).shape)

    def f():
        return float((w * layer.forward(x)).sum())

    layer.zero_grad()
    layer.forward(x)
    gx = layer.backward(w)
    assert max_rel_error(gx, numeric_grad(f, x)) < TOL
    analytic = {n: g.copy() for n, _, g in layer.named_parameters()}
    for name, p, _ in layer.named_parameters():
        assert max_rel_error(analytic[name], numeric_grad(f, p)) < TOL, name


class TestConv1d:
    def test_identity_kernel(self, rng):
        x = rng.standard_normal((2, 1, 17))
        y = conv1d_forward(x, np.ones((1, 1, 1)), np.zeros(1))
        np.testing.assert_array_equal(y, x)

    def test_strided_length(self, rng):
        layer = Conv1d(2, 3, kernel=3, stride=2, padding=1, rng=rng)
        assert layer.spec.out_length(800) == 400
        assert layer.forward(rng.standard_normal((1, 2, 800))).shape == (1, 3, 400)

    def test_zero_weights(self, rng):
        y = conv1d_forward(rng.standard_normal((2, 3, 10)), np.zeros((4, 3, 3)), np.zeros(4), padding=1)
        assert not y.any()

    def test_channel_mismatch_names_layer(self, rng):
        layer = Conv1d(2, 3, 3, rng=rng, name="enc.conv_in")
        with pytest.raises(ShapeError, match="enc.conv_in"):
            layer.forward(np.zeros((1, 5, 10)))

    def test_zero_grad_out(self, rng):
        x = rng.standard_normal((1, 2, 8))
        w = rng.standard_normal((3, 2, 3))
        gx, gw, gb = conv1d_backward(np.zeros((1, 3, 8)), x, w, 1, 1)
        assert not gx.any() and not gw.any() and not gb.any()

    def test_identity_backward(self, rng):
        x = rng.standard_normal((1, 1, 9))
        g = rng.standard_normal((1, 1, 9))
        gx, _, _ = conv1d_backward(g, x, np.ones((1, 1, 1)))
        np.testing.assert_array_equal(gx, g)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_finite_differences(self, rng, stride, padding):
        layer = Conv1d(2, 3, 3, stride, padding, rng=rng)
        layer.params["bias"][:] = rng.standard_normal(3)
        check_layer_grads(layer, rng.standard_normal((2, 2, 8)), rng)

    def test_forward_matches_naive_loops(self, rng):
        x = rng.standard_normal((1, 2, 7))
        w = rng.standard_normal((3, 2, 3))
        b = rng.standard_normal(3)
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1)))
        expected = np.zeros((1, 3, 4))
        for o in range(3):
            for t in range(4):
                expected[0, o, t] = b[o] + sum(w[o, c, j] * xp[0, c, 2 * t + j] for c in range(2) for j in range(3))
        np.testing.assert_allclose(conv1d_forward(x, w, b, stride=2, padding=1), expected, rtol=1e-12)


class TestTransposedConv:
    def test_upsampling_length(self, rng):
        layer = ConvTranspose1d(2, 2, kernel=4, stride=2, padding=1, rng=rng)
        assert layer.spec.out_length(100) == 200
        assert layer.forward(rng.standard_normal((1, 2, 100))).shape == (1, 2, 200)

    def test_is_adjoint_of_conv(self, rng):
        # <conv(x), y> == <x, tconv(y)> for shared weights and no bias
        w = rng.standard_normal((3, 2, 4))
        x = rng.standard_normal((1, 2, 10))
        y = rng.standard_normal((1, 3, 5))
        lhs = (conv1d_forward(x, w, None, stride=2, padding=1) * y).sum()
        rhs = (x * tconv1d_forward(y, w.transpose(0, 1, 2), None, stride=2, padding=1)).sum()
        assert lhs == pytest.approx(rhs, rel=1e-12)

    @pytest.mark.parametrize("kernel,stride,padding", [(3, 1, 1), (4, 2, 1), (6, 3, 1)])
    def test_finite_differences(self, rng, kernel, stride, padding):
        layer = ConvTranspose1d(2, 3, kernel, stride, padding, rng=rng)
        layer.params["bias"][:] = rng.standard_normal(3)
        check_layer_grads(layer, rng.standard_normal((2, 2, 6)), rng)


class TestChannelLinear:
    def test_identity(self, rng):
        x = rng.standard_normal((2, 3, 5))
        np.testing.assert_array_equal(ChannelLinear(3, 5).forward(x), x)

    def test_zero_weight_gives_bias(self, rng):
        b = rng.standard_normal(4)
        y = channel_linear_forward(rng.standard_normal((2, 3, 4)), np.zeros((4, 4)), b)
        np.testing.assert_array_equal(y, np.broadcast_to(b, (2, 3, 4)))

    def test_matches_naive_matmul(self, rng):
        x = rng.standard_normal((1, 3, 4))
        w = rng.standard_normal((4, 4))
        b = rng.standard_normal(4)
        expected = np.array([[[b[i] + sum(w[i, j] * x[0, c, j] for j in range(4)) for i in range(4)]
                              for c in range(3)]])
        np.testing.assert_allclose(channel_linear_forward(x, w, b), expected, rtol=1e-12)

    def test_finite_differences(self, rng):
        layer = ChannelLinear(3, 4)
        layer.params["weight"][:] = rng.standard_normal((4, 4))
        check_layer_grads(layer, rng.standard_normal((2, 3, 4)), rng)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            ChannelLinear(3, 4).forward(np.zeros((1, 3, 5)))


class TestActivations:
    def test_prelu_negative(self):
        assert prelu_forward(np.array([[[-1.0]]]), np.array([0.25]))[0, 0, 0] == -0.25

    def test_prelu_positive_passthrough(self):
        assert prelu_forward(np.array([[[2.0]]]), np.array([0.25]))[0, 0, 0] == 2.0

    def test_elu_values(self):
        assert elu_forward(np.array(0.0)) == 0.0
        assert float(elu_forward(np.array(-1.0), 1.0)) == pytest.approx(math.exp(-1) - 1, abs=1e-15)
        assert float(elu_forward(np.array(-1.0), 1.0)) == pytest.approx(-0.6321, abs=1e-4)

    @pytest.mark.parametrize("per_channel", [True, False])
    def test_prelu_finite_differences(self, rng, per_channel):
        layer = PReLU(3 if per_channel else 1)
        layer.params["slope"][:] = rng.uniform(0.1, 0.5, layer.params["slope"].shape)
        check_layer_grads(layer, rng.standard_normal((2, 3, 6)), rng)

    def test_elu_finite_differences(self, rng):
        check_layer_grads(ELU(0.7), rng.standard_normal((2, 3, 6)), rng)


class TestResidualUnit:
    def test_preserves_shape(self, rng):
        unit = ResidualUnit(4, 3, PReLU(4), rng)
        assert unit.forward(rng.standard_normal((2, 4, 11))).shape == (2, 4, 11)

    def test_finite_differences(self, rng):
        unit = ResidualUnit(3, 3, ELU(), rng)
        check_layer_grads(unit, rng.standard_normal((2, 3, 7)), rng)

    def test_sequential_finite_differences(self, rng):
        net = Sequential(("a", Conv1d(2, 3, 5, 2, rng=rng)), ("b", PReLU(3)),
                         ("c", ConvTranspose1d(3, 2, 4, 2, 1, rng=rng)), ("d", ELU()))
        check_layer_grads(net, rng.standard_normal((2, 2, 8)), rng)


class TestShapeAlgebra:
    @given(length=st.integers(1, 400), kernel=st.integers(1, 9), stride=st.integers(1, 4), padding=st.integers(0, 4))
    @settings(max_examples=60, deadline=None)
    def test_conv_length_formula(self, length, kernel, stride, padding):
        expected = (length + 2 * padding - kernel) // stride + 1
        assert conv1d_out_len(length, kernel, stride, padding) == expected
        if expected > 0:
            x = np.zeros((1, 1, length))
            y = conv1d_forward(x, np.zeros((1, 1, kernel)), None, stride, padding)
            assert y.shape[2] == expected
        else:
            with pytest.raises(ShapeError):
                infer_shapes([("c", LayerSpec("conv1d", 1, 1, kernel, stride, padding))], 1, length)

    def test_chain_rejects_collapse(self):
        specs = [(f"conv{i}", LayerSpec("conv1d", 1, 1, 5, 4, 0)) for i in range(5)]
        with pytest.raises(ShapeError, match="conv"):
            infer_shapes(specs, 1, 100)

    def test_chain_channel_mismatch(self):
        specs = [("a", LayerSpec("conv1d", 2, 3, 3, 1, 1)), ("b", LayerSpec("conv1d", 4, 1, 3, 1, 1))]
        with pytest.raises(ShapeError, match="b"):
            infer_shapes(specs, 2, 10)

    def test_tconv_length(self):
        assert LayerSpec("tconv1d", 1, 1, 4, 2, 1).out_length(100) == 200


class TestDeterminism:
    def test_repeated_forward_bit_identical(self, rng):
        net = Sequential(("a", Conv1d(3, 4, 5, 2, rng=rng)), ("b", PReLU(4)), ("c", ChannelLinear(4, 10)))
        x = rng.standard_normal((2, 3, 20))
        assert np.array_equal(net.forward(x), net.forward(x.copy()))


class TestWeightArchive:
    def store(self, rng):
        return {"enc.w": rng.standard_normal((3, 2, 5)), "enc.b": rng.standard_normal(3),
                "scalarish": rng.standard_normal(1), "perm": np.arange(7)}

    def test_roundtrip_bit_identical(self, rng, tmp_path):
        store = self.store(rng)
        save_weights(store, tmp_path / "w.bin", meta={"note": "x"})
        loaded, meta, precision = load_weights(tmp_path / "w.bin")
        assert meta == {"note": "x"} and precision == "train"
        assert list(loaded) == list(store)
        for k in store:
            assert loaded[k].dtype == store[k].dtype
            assert loaded[k].tobytes() == store[k].tobytes()

    def test_edge_precision_rounds_to_half(self, rng):
        store = self.store(rng)
        loaded, _, precision = loads(dumps(store, "edge"))
        assert precision == "edge"
        for k in ("enc.w", "enc.b"):
            oracle = np.array([np.float16(v) for v in store[k].ravel()]).reshape(store[k].shape)
            np.testing.assert_array_equal(loaded[k], oracle)

    def test_truncated(self, rng):
        data = dumps(self.store(rng))
        for cut in (3, 20, len(data) // 2, len(data) - 1):
            with pytest.raises(FormatError):
                loads(data[:cut])

    def test_bad_magic_and_version(self, rng):
        data = bytearray(dumps(self.store(rng)))
        with pytest.raises(FormatError, match="magic"):
            loads(b"XXXX" + bytes(data[4:]))
        data[4] = 9
        with pytest.raises(FormatError) as exc:
            loads(bytes(data))
        assert exc.value.code == "E_VERSION"

    def test_bitflip_detected(self, rng):
        data = bytearray(dumps(self.store(rng)))
        data[-10] ^= 0x01
        with pytest.raises(FormatError, match="checksum"):
            loads(bytes(data))

    def test_shape_mismatch_on_load_into_model(self, rng):
        layer = Conv1d(2, 3, 3, rng=rng)
        state = layer.state_dict()
        state["weight"] = np.zeros((3, 2, 5))
        with pytest.raises(ShapeError, match="weight"):
            layer.load_state_dict(state)

    def test_param_count_is_sum_of_sizes(self, rng):
        net = Sequential(("a", Conv1d(3, 4, 5, rng=rng)), ("b", PReLU(4)), ("c", ChannelLinear(4, 6)))
        assert net.num_params() == (4 * 3 * 5 + 4) + 4 + (36 + 6)
        for _, p, g in net.named_parameters():
            assert g.shape == p.shape
