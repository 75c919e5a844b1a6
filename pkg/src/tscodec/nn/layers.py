"""Layer objects wrapping the functional kernels.

A layer owns its parameters and gradient buffers and remembers the input of
its last forward call, so ``backward`` must follow the matching ``forward``.
Gradients accumulate until :meth:`Module.zero_grad`.
"""
from dataclasses import dataclass
import math

import numpy as np

from ..errors import ShapeError
from . import functional as F

TRAIN_DTYPE = np.float64
EDGE_DTYPE = np.float16


def round_half(x):
    """Round to the nearest float16 value, computing on in float32."""
    return np.asarray(x).astype(EDGE_DTYPE).astype(np.float32)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int
    out_channels: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    def out_length(self, length):
        if self.kind == "conv1d":
            return F.conv1d_out_len(length, self.kernel, self.stride, self.padding)
        if self.kind == "tconv1d":
            return F.tconv1d_out_len(length, self.kernel, self.stride, self.padding)
        if self.kind == "channel-linear":
            if length != self.kernel:
                raise ShapeError(f"channel-linear expects length {self.kernel}, got {length}")
            return self.kernel
        return length


def infer_shapes(specs, channels, length):
    """Walk ``(name, LayerSpec)`` pairs and return the output ``(channels, length)``.

    Raises :class:`ShapeError` naming the first layer that would produce a
    non-positive length or receives the wrong channel count.
    """
    for name, spec in specs:
        if spec.in_channels != channels:
            raise ShapeError(f"{name}: expects {spec.in_channels} channels, receives {channels}")
        new_length = spec.out_length(length)
        if new_length <= 0:
            raise ShapeError(f"{name}: length {length} -> {new_length}")
        channels, length = spec.out_channels, new_length
    return channels, length


class Module:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self.children = {}
        self.edge = False

    def add_param(self, name, value):
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def add_child(self, name, module):
        self.children[name] = module
        return module

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def named_parameters(self, prefix=""):
        for name, value in self.params.items():
            yield prefix + name, value, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def state_dict(self):
        return {name: p for name, p, _ in self.named_parameters()}

    def load_state_dict(self, state):
        own = {name: p for name, p, _ in self.named_parameters()}
        missing = own.keys() - state.keys()
        if missing:
            raise ShapeError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            src = np.asarray(state[name])
            if src.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {src.shape} != model shape {p.shape}")
            p[...] = src

    def num_params(self):
        return sum(p.size for _, p, _ in self.named_parameters())

    def zero_grad(self):
        for _, _, g in self.named_parameters():
            g[...] = 0.0

    def layer_specs(self, prefix=""):
        spec = getattr(self, "spec", None)
        if spec is not None:
            yield prefix.rstrip("."), spec
        for cname, child in self.children.items():
            yield from child.layer_specs(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self.children.values():
            yield from child.modules()

    def astype(self, dtype):
        for m in self.modules():
            for name in m.params:
                m.params[name] = m.params[name].astype(dtype)
                m.grads[name] = np.zeros_like(m.params[name])
        return self

    def to_edge(self):
        """Switch to edge precision in place: float16-rounded weights and activations."""
        for m in self.modules():
            m.edge = True
            for name in m.params:
                m.params[name] = round_half(m.params[name])
                m.grads[name] = np.zeros_like(m.params[name])
        return self

    def _out(self, y):
        return round_half(y) if self.edge else y


RESIDUAL_INIT_SCALE = 0.1


def kaiming_uniform(rng, shape, fan_in, dtype=TRAIN_DTYPE):
    # He init (gain sqrt(2)): keeps activation variance roughly flat through
    # deep stacks that have no normalization layers
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=None, rng=None, name="conv1d"):
        super().__init__()
        if padding is None:
            padding = (kernel - 1) // 2
        self.spec = LayerSpec("conv1d", in_channels, out_channels, kernel, stride, padding)
        self.name = name
        rng = rng or np.random.default_rng(0)
        self.add_param("weight", kaiming_uniform(rng, (out_channels, in_channels, kernel), in_channels * kernel))
        self.add_param("bias", np.zeros(out_channels, dtype=TRAIN_DTYPE))

    def forward(self, x):
        self._x = x
        s = self.spec
        return self._out(F.conv1d_forward(x, self.params["weight"], self.params["bias"], s.stride, s.padding, self.name))

    def backward(self, grad_out):
        s = self.spec
        gx, gw, gb = F.conv1d_backward(grad_out, self._x, self.params["weight"], s.stride, s.padding, self.name)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


class ConvTranspose1d(Module):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0, rng=None, name="tconv1d"):
        super().__init__()
        self.spec = LayerSpec("tconv1d", in_channels, out_channels, kernel, stride, padding)
        self.name = name
        rng = rng or np.random.default_rng(0)
        self.add_param("weight", kaiming_uniform(rng, (in_channels, out_channels, kernel),
                                                 max(1, in_channels * kernel // stride)))
        self.add_param("bias", np.zeros(out_channels, dtype=TRAIN_DTYPE))

    def forward(self, x):
        self._x = x
        s = self.spec
        return self._out(F.tconv1d_forward(x, self.params["weight"], self.params["bias"], s.stride, s.padding, self.name))

    def backward(self, grad_out):
        s = self.spec
        gx, gw, gb = F.tconv1d_backward(grad_out, self._x, self.params["weight"], s.stride, s.padding, self.name)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


class ChannelLinear(Module):
    """``length x length`` affine map over time, one matrix shared by all channels.

    Starts as the identity map.
    """

    def __init__(self, channels, length, name="channel_linear"):
        super().__init__()
        self.spec = LayerSpec("channel-linear", channels, channels, kernel=length)
        self.name = name
        self.add_param("weight", np.eye(length, dtype=TRAIN_DTYPE))
        self.add_param("bias", np.zeros(length, dtype=TRAIN_DTYPE))

    def forward(self, x):
        self._x = x
        return self._out(F.channel_linear_forward(x, self.params["weight"], self.params["bias"], self.name))

    def backward(self, grad_out):
        gx, gw, gb = F.channel_linear_backward(grad_out, self._x, self.params["weight"], self.name)
        self.grads["weight"] += gw
        self.grads["bias"] += gb
        return gx


class PReLU(Module):
    def __init__(self, channels=1, init=0.25):
        super().__init__()
        self.add_param("slope", np.full(channels, init, dtype=TRAIN_DTYPE))

    def forward(self, x):
        self._x = x
        return self._out(F.prelu_forward(x, self.params["slope"]))

    def backward(self, grad_out):
        gx, ga = F.prelu_backward(grad_out, self._x, self.params["slope"])
        self.grads["slope"] += ga
        return gx


class ELU(Module):
    def __init__(self, alpha=1.0):
        super().__init__()
        self.alpha = alpha

    def forward(self, x):
        self._x = x
        return self._out(F.elu_forward(x, self.alpha))

    def backward(self, grad_out):
        return F.elu_backward(grad_out, self._x, self.alpha)


class Sequential(Module):
    def __init__(self, *named):
        super().__init__()
        for name, module in named:
            self.add_child(name, module)

    def forward(self, x):
        for child in self.children.values():
            x = child(x)
        return x

    def backward(self, grad_out):
        for child in reversed(list(self.children.values())):
            grad_out = child.backward(grad_out)
        return grad_out


class ResidualUnit(Module):
    """Two same-length convolutions bypassed by an identity skip, then an activation."""

    def __init__(self, channels, kernel, activation, rng=None):
        super().__init__()
        self.conv1 = self.add_child("conv1", Conv1d(channels, channels, kernel, rng=rng, name="res.conv1"))
        self.conv2 = self.add_child("conv2", Conv1d(channels, channels, kernel, rng=rng, name="res.conv2"))
        self.act = self.add_child("act", activation)
        # start close to act(x) so stacked units do not compound the variance
        self.conv2.params["weight"] *= RESIDUAL_INIT_SCALE

    def forward(self, x):
        h = self.conv2(self.conv1(x))
        return self.act(self._out(x + h))

    def backward(self, grad_out):
        gs = self.act.backward(grad_out)
        return gs + self.conv1.backward(self.conv2.backward(gs))


class MeanOverTime(Module):
    """(N, C, L) -> (N, C)"""

    def forward(self, x):
        self._shape = x.shape
        return self._out(x.mean(axis=2))

    def backward(self, grad_out):
        n, c, length = self._shape
        return np.broadcast_to(grad_out[:, :, None] / length, self._shape).copy()
