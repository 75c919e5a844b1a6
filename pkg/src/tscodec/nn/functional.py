"""Pure forward/backward kernels for the layers used by the codec.

All arrays are batched ``(N, C, L)`` (batch, channels, time), channel-major
and time-minor.  Backward functions take the saved forward input and return
``(grad_input, *param_grads)``; nothing here keeps state.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError


def conv1d_out_len(length, kernel, stride=1, padding=0):
    return (length + 2 * padding - kernel) // stride + 1


def tconv1d_out_len(length, kernel, stride=1, padding=0):
    return (length - 1) * stride - 2 * padding + kernel


def _check3(x, channels, name):
    if x.ndim != 3:
        raise ShapeError(f"{name}: expected (N, C, L) input, got shape {x.shape}")
    if x.shape[1] != channels:
        raise ShapeError(f"{name}: expected {channels} input channels, got {x.shape[1]}")


def _im2col(x, kernel, stride, padding):
    # (N, C, L) -> (N, L_out, C*K)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    win = sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]  # (N, C, L_out, K)
    n, c, lo, k = win.shape
    return np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n, lo, c * k)


def conv1d_forward(x, weight, bias, stride=1, padding=0, name="conv1d"):
    """Cross-correlation; ``weight`` is ``(C_out, C_in, K)``, zero padding."""
    c_out, c_in, k = weight.shape
    _check3(x, c_in, name)
    l_out = conv1d_out_len(x.shape[2], k, stride, padding)
    if l_out <= 0:
        raise ShapeError(f"{name}: input length {x.shape[2]} too short for kernel {k}")
    cols = _im2col(x, k, stride, padding)
    y = cols @ weight.reshape(c_out, c_in * k).T  # (N, L_out, C_out)
    y = y.transpose(0, 2, 1)
    if bias is not None:
        y = y + bias[None, :, None]
    return np.ascontiguousarray(y)


def conv1d_backward(grad_out, x, weight, stride=1, padding=0, name="conv1d"):
    c_out, c_in, k = weight.shape
    _check3(x, c_in, name)
    n, _, length = x.shape
    l_out = conv1d_out_len(length, k, stride, padding)
    if grad_out.shape != (n, c_out, l_out):
        raise ShapeError(f"{name}: grad shape {grad_out.shape} != {(n, c_out, l_out)}")
    cols = _im2col(x, k, stride, padding)  # (N, L_out, C_in*K)
    g = grad_out.transpose(0, 2, 1)  # (N, L_out, C_out)
    grad_w = np.tensordot(g, cols, axes=([0, 1], [0, 1])).reshape(c_out, c_in, k)
    grad_b = grad_out.sum(axis=(0, 2))
    gcols = (g @ weight.reshape(c_out, c_in * k)).reshape(n, l_out, c_in, k)
    gcols = gcols.transpose(0, 2, 1, 3)  # (N, C_in, L_out, K)
    gx = np.zeros((n, c_in, length + 2 * padding), dtype=np.result_type(grad_out, weight))
    span = stride * (l_out - 1) + 1
    for j in range(k):
        gx[:, :, j:j + span:stride] += gcols[:, :, :, j]
    if padding:
        gx = gx[:, :, padding:padding + length]
    return np.ascontiguousarray(gx), grad_w, grad_b


def tconv1d_forward(x, weight, bias, stride=1, padding=0, name="tconv1d"):
    """Transposed convolution; ``weight`` is ``(C_in, C_out, K)``."""
    c_in, c_out, k = weight.shape
    _check3(x, c_in, name)
    n, _, length = x.shape
    l_out = tconv1d_out_len(length, k, stride, padding)
    if l_out <= 0:
        raise ShapeError(f"{name}: output length {l_out} is not positive")
    contrib = (x.transpose(0, 2, 1) @ weight.reshape(c_in, c_out * k)).reshape(n, length, c_out, k)
    contrib = contrib.transpose(0, 2, 1, 3)  # (N, C_out, L, K)
    full = np.zeros((n, c_out, (length - 1) * stride + k), dtype=contrib.dtype)
    span = stride * (length - 1) + 1
    for j in range(k):
        full[:, :, j:j + span:stride] += contrib[:, :, :, j]
    y = full[:, :, padding:padding + l_out]
    if bias is not None:
        y = y + bias[None, :, None]
    return np.ascontiguousarray(y)


def tconv1d_backward(grad_out, x, weight, stride=1, padding=0, name="tconv1d"):
    c_in, c_out, k = weight.shape
    _check3(x, c_in, name)
    n, _, length = x.shape
    l_out = tconv1d_out_len(length, k, stride, padding)
    if grad_out.shape != (n, c_out, l_out):
        raise ShapeError(f"{name}: grad shape {grad_out.shape} != {(n, c_out, l_out)}")
    full = np.zeros((n, c_out, (length - 1) * stride + k), dtype=grad_out.dtype)
    full[:, :, padding:padding + l_out] = grad_out
    # gathered[n, l, o, j] = full[n, o, l*stride + j]
    gathered = sliding_window_view(full, k, axis=2)[:, :, ::stride, :]  # (N, C_out, L, K)
    gathered = np.ascontiguousarray(gathered.transpose(0, 2, 1, 3)).reshape(n, length, c_out * k)
    wmat = weight.reshape(c_in, c_out * k)
    gx = (gathered @ wmat.T).transpose(0, 2, 1)
    grad_w = np.tensordot(x, gathered, axes=([0, 2], [0, 1])).reshape(c_in, c_out, k)
    grad_b = grad_out.sum(axis=(0, 2))
    return np.ascontiguousarray(gx), grad_w, grad_b


def channel_linear_forward(x, weight, bias, name="channel_linear"):
    """Affine map along time, shared by every channel: ``y[n, c] = W @ x[n, c] + b``."""
    l_out, l_in = weight.shape
    if x.ndim != 3 or x.shape[2] != l_in:
        raise ShapeError(f"{name}: expected length {l_in}, got shape {x.shape}")
    y = x @ weight.T
    if bias is not None:
        y = y + bias
    return y


def channel_linear_backward(grad_out, x, weight, name="channel_linear"):
    if grad_out.shape[:2] != x.shape[:2] or grad_out.shape[2] != weight.shape[0]:
        raise ShapeError(f"{name}: grad shape {grad_out.shape} inconsistent with input {x.shape}")
    gx = grad_out @ weight
    flat_g = grad_out.reshape(-1, weight.shape[0])
    grad_w = flat_g.T @ x.reshape(-1, weight.shape[1])
    grad_b = flat_g.sum(axis=0)
    return gx, grad_w, grad_b


def _slope_view(slope, x):
    # per-channel (C,) or shared (1,) slope
    return slope.reshape(1, -1, 1) if slope.size > 1 else slope.reshape(1, 1, 1)


def prelu_forward(x, slope):
    a = _slope_view(slope, x)
    return np.where(x >= 0, x, a * x)


def prelu_backward(grad_out, x, slope):
    a = _slope_view(slope, x)
    neg = x < 0
    gx = np.where(neg, a * grad_out, grad_out)
    ga = np.where(neg, x * grad_out, 0.0)
    if slope.size > 1:
        ga = ga.sum(axis=(0, 2))
    else:
        ga = np.array([ga.sum()], dtype=slope.dtype)
    return gx, ga


def elu_forward(x, alpha=1.0):
    return np.where(x >= 0, x, alpha * np.expm1(np.minimum(x, 0.0)))


def elu_backward(grad_out, x, alpha=1.0):
    return np.where(x >= 0, grad_out, grad_out * alpha * np.exp(np.minimum(x, 0.0)))
