import numpy as np
import pytest

from trajoracle import diffkernel as dk


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar f with respect to array x (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-8)
    return float(np.abs(a - b).max() / denom)


def check_grad(build, params, h=1e-5):
    """Relative error between autodiff and numeric gradients, all ``params`` concatenated.

    Pooling avoids dividing by an exactly-zero gradient (e.g. a bias feeding batch norm).
    """
    for p in params:
        p.zero_grad()
    build().backward()
    auto, num = [], []
    for p in params:
        auto.append(p.grad.ravel().copy())
        with dk.no_grad():
            num.append(numeric_grad(lambda: build().item(), p.data, h).ravel())
    return rel_err(np.concatenate(auto), np.concatenate(num))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
