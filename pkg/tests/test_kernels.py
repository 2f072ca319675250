import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trajoracle import kernels

BACKENDS = kernels.backends()


def test_compiled_backend_available():
    # the sdist builds the extension; a missing one falls back silently, so say so here
    assert kernels.BACKEND in ("cython", "python")
    if "cython" not in BACKENDS:
        pytest.skip("compiled kernels not built")


def brute_topk(mat, q, k):
    scores = [sum(q[j] * mat[i, j] for j in range(mat.shape[1])) for i in range(mat.shape[0])]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]
    return order, [scores[i] for i in order]


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_topk_matches_bruteforce(name, rng):
    mod = BACKENDS[name]
    for _ in range(200):
        n, d = int(rng.integers(1, 30)), int(rng.integers(1, 8))
        mat = rng.integers(-2, 3, size=(n, d)).astype(float)  # many exact ties
        q = rng.integers(-2, 3, size=d).astype(float)
        k = int(rng.integers(1, 35))
        idx, sims = mod.topk_inner_product(mat, q, k)
        want_idx, want = brute_topk(mat, q, k)
        assert list(idx) == want_idx and list(sims) == want


def brute_auc(s, y):
    pos = [a for a, b in zip(s, y) if b == 1]
    neg = [a for a, b in zip(s, y) if b == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_auc_matches_pair_counting(name, rng):
    mod = BACKENDS[name]
    for _ in range(300):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, size=n)
        y[0], y[1] = 0, 1
        s = rng.integers(0, 6, size=n) / 5.0
        assert mod.mann_whitney_auc(s, y.astype(np.int_)) == brute_auc(s, y)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="only one backend")
@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_backends_bit_identical(seed):
    rng = np.random.default_rng(seed)
    a, b = BACKENDS["cython"], BACKENDS["python"]
    n, d = int(rng.integers(1, 70)), int(rng.integers(1, 40))
    mat = rng.normal(size=(n, d))
    qs = rng.normal(size=(3, d))
    k = int(rng.integers(1, 10))
    ia, sa = a.topk_inner_product_batch(mat, qs, k)
    ib, sb = b.topk_inner_product_batch(mat, qs, k)
    assert np.array_equal(ia, ib) and sa.tobytes() == sb.tobytes()
    y = rng.integers(0, 2, size=n + 2).astype(np.int_)
    y[:2] = [0, 1]
    s = rng.normal(size=n + 2)
    assert a.mann_whitney_auc(s, y) == b.mann_whitney_auc(s, y)
    states = [[rng.normal(size=d) for _ in range(2)] + [rng.normal(size=d),
                                                        rng.random(d)] for _ in range(1)]
    p, g, m, v = states[0]
    pa, ma, va = p.copy(), m.copy(), v.copy()
    pb, mb, vb = p.copy(), m.copy(), v.copy()
    args = (0.999, 0.9, 0.999, 0.3, 1e-8, 0.01)
    a.adamw_update(pa, g, ma, va, *args)
    b.adamw_update(pb, g, mb, vb, *args)
    assert pa.tobytes() == pb.tobytes() and ma.tobytes() == mb.tobytes()
    assert va.tobytes() == vb.tobytes()
