import numpy as np

from ..errors import EmptyDataset


def center_slice(length, span):
    start = (length - span) // 2
    return slice(start, start + span)


def channel_percent_errors(x, x_hat, span=512):
    """Per-window, per-channel error in percent on the centred ``span`` samples.

    Each channel's mean absolute error is divided by the channel's mean
    absolute value over the same span, floored at 1e-8 of the largest
    magnitude in ``x`` to survive near-zero channels.
    """
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_hat.shape}")
    sl = center_slice(x.shape[-1], min(span, x.shape[-1]))
    xs, hs = x[..., sl], x_hat[..., sl]
    num = np.abs(hs - xs).mean(axis=-1)
    floor = max(1e-8 * float(np.abs(x).max(initial=0.0)), np.finfo(np.float64).tiny)
    denom = np.maximum(np.abs(xs).mean(axis=-1), floor)
    return 100.0 * num / denom


def average_error(x, x_hat, span=512):
    x = np.asarray(x)
    if x.size == 0:
        raise EmptyDataset("cannot evaluate an empty dataset")
    return float(channel_percent_errors(x, x_hat, span).mean())


def evaluate(codec, windows, n_active, n_workers=1):
    """Average percent error of ``codec`` over ``windows`` at ``n_active`` quantizers."""
    windows = np.asarray(windows, dtype=np.float64)
    if len(windows) == 0:
        raise EmptyDataset("cannot evaluate an empty dataset")
    x_hat = codec.reconstruct(windows, n_active, n_workers)
    return average_error(windows, x_hat, codec.config.eval_span)


def evaluate_all(codec, windows, n_workers=1):
    return {n: evaluate(codec, windows, n, n_workers) for n in range(1, codec.stack.n_quantizers + 1)}
