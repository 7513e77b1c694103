import numpy as np
import pytest

from splitmf.mf import RatingMatrix


def fd_grad(fun, X, step=1e-6):
    """Central finite differences of a scalar function, entry by entry."""
    g = np.zeros_like(X, dtype=np.float64)
    for idx in np.ndindex(*X.shape):
        Xp = X.copy()
        Xm = X.copy()
        Xp[idx] += step
        Xm[idx] -= step
        g[idx] = (fun(Xp) - fun(Xm)) / (2.0 * step)
    return g


def random_instance(rng, n_users=None, m_items=None, dim=None, fill=0.6):
    """A random rating matrix plus factor matrices for gradient checks."""
    n = n_users or rng.integers(2, 11)
    m = m_items or rng.integers(2, 11)
    d = dim or rng.integers(1, 5)
    mask = rng.random((n, m)) < fill
    if not mask.any():
        mask[rng.integers(n), rng.integers(m)] = True
    users, items = np.nonzero(mask)
    values = rng.normal(0.0, 1.5, size=users.size)
    R = RatingMatrix(int(n), int(m), users, items, values)
    U = rng.normal(0.0, 1.0, size=(n, d))
    V = rng.normal(0.0, 1.0, size=(d, m))
    return R, U, V


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
