"""Independent oracles shared by the test suite.

These implementations deliberately avoid the library's own code paths:
finite differences for gradients, plain-numpy softmax, and brute-force
enumeration for decoding. They are the reference side of every dual-route
check and must stay that way.
"""

import numpy as np


def fd_gradient(f, tensors, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each tensor.

    ``f`` must be a zero-argument callable returning a float and reading the
    current contents of ``tensors``. Returns one array per tensor.
    """
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    """Per-coordinate comparison with a mixed absolute/relative tolerance."""
    analytic = np.zeros_like(numeric) if analytic is None else analytic
    err = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    worst = (err - bound).max()
    assert (err <= bound).all(), f"gradient mismatch, worst excess {worst:.3e}"


def np_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def np_log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
