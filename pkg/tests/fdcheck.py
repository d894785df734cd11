"""Central finite-difference gradient oracle, independent of the tape."""

import numpy as np


def finite_difference(f, tensors, step):
    """Numerical gradient of scalar-valued f() w.r.t. each tensor's data.

    f must re-read tensor.data on every call; tensors are restored
    afterwards. Returns a list of arrays aligned with `tensors`.
    """
    grads = []
    for t in tensors:
        original = t.data.copy()
        grad = np.zeros_like(original, dtype=np.float64)
        it = np.nditer(original, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            bumped = original.copy()
            bumped[idx] += step
            t.data = bumped
            up = f()
            bumped = original.copy()
            bumped[idx] -= step
            t.data = bumped
            down = f()
            grad[idx] = (up - down) / (2.0 * step)
            it.iternext()
        t.data = original
        grads.append(grad)
    return grads


def max_relative_error(analytic, numeric):
    """Largest |a - n| scaled by the numeric gradient's own magnitude."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale
