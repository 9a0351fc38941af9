import numpy as np
import pytest

from sslconvsac import autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_grads(build, tensors, eps=1e-6):
    """Max relative error between tape gradients and central differences."""
    with ad.Tape() as tape:
        loss = build()
    grads = tape.backward(loss, wrt=tensors)
    worst = 0.0
    for t in tensors:
        num = numeric_grad(lambda: float(build().data), t.data, eps)
        worst = max(worst, rel_err(grads[t], num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
