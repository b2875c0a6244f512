import numpy as np
import pytest

from fedfm.nn import MlpParams


def central_diff(f, x, eps=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f()
        flat[i] = orig - eps
        down = f()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))


def linear_params(W, b):
    W = np.asarray(W, dtype=float)
    return MlpParams([W.shape[0], W.shape[1]], [W], [np.asarray(b, dtype=float)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
