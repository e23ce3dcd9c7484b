"""Shared test oracles: finite differences and naive reference code."""

import numpy as np

FD_STEP = 1e-5


def finite_difference(scalar_fn, array, step=FD_STEP):
    """Central-difference gradient of scalar_fn with respect to ``array``,
    perturbing it in place."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = scalar_fn()
        flat[i] = orig - step
        down = scalar_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * step)
    return grad


def assert_grads_close(analytic, numeric, rtol, atol=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    assert analytic.shape == numeric.shape
    diff = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    assert (diff <= bound).all(), (
        f"gradient mismatch: worst diff {diff.max():.3e}, "
        f"allowed {bound.flat[np.argmax(diff)]:.3e}"
    )


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out
