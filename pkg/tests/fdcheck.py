"""Central finite differences, the independent oracle for every backward pass."""
import numpy as np

STEP = 1e-6
# relative error is measured against max(|analytic|, |numeric|, FLOOR)
FLOOR = 1e-6


def numeric_grad(f, arr, step=STEP):
    """d f() / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + step
        hi = f()
        arr[i] = old - step
        lo = f()
        arr[i] = old
        grad[i] = (hi - lo) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, floor=FLOOR):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))
