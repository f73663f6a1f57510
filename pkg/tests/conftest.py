import numpy as np
import pytest

from dfkd.tensor import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def finite_diff(f, x, eps=1e-3):
    """Central finite differences of scalar f w.r.t. flat 64-bit array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def grad_check(build_loss, x0, eps=1e-3, rtol=1e-3):
    """Compare analytic grad of build_loss(Tensor) against central differences.

    build_loss gets a float64 leaf tensor and must return a scalar Tensor.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    loss = build_loss(leaf)
    loss.backward()
    analytic = leaf.grad

    def f(x):
        return build_loss(Tensor(x, dtype=np.float64)).item()

    numeric = finite_diff(f, x0, eps=eps)
    denom = np.maximum(np.abs(numeric), np.abs(analytic))
    denom = np.where(denom < 1e-6, 1.0, denom)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < rtol, f"grad check failed: max rel err {rel.max():.3e}"
    return analytic, numeric
