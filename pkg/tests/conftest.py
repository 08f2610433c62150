import numpy as np
import pytest


def random_matrix(rng, m, n, rank=None):
    """Gaussian matrix, optionally forced to a lower rank."""
    if rank is None or rank >= min(m, n):
        return rng.standard_normal((m, n))
    return rng.standard_normal((m, rank)) @ rng.standard_normal((rank, n))


def central_diff(f, x, h):
    """Central differences of a scalar or array valued f w.r.t. every entry of x."""
    x = np.asarray(x, dtype=float)
    base = np.asarray(f(x))
    out = np.empty(base.shape + x.shape)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[(...,) + idx] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-12, np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
