# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: flat inner-product top-k and rank-based AUC.

Arithmetic order mirrors ``_kernels_py`` exactly so both backends agree
bit for bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline bint _before(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib) noexcept nogil:
    # ordering: higher score first, then lower insertion index
    return sa > sb or (sa == sb and ia < ib)


cdef void _scan(const double[:, ::1] mat, const double[::1] q, Py_ssize_t k,
                double* best_s, Py_ssize_t* best_i, Py_ssize_t* filled) noexcept nogil:
    cdef Py_ssize_t n = mat.shape[0], d = mat.shape[1]
    cdef Py_ssize_t i, j, pos
    cdef double s
    filled[0] = 0
    for i in range(n):
        s = 0.0
        for j in range(d):
            s = s + mat[i, j] * q[j]
        if filled[0] < k:
            pos = filled[0]
            filled[0] += 1
        elif _before(s, i, best_s[k - 1], best_i[k - 1]):
            pos = k - 1
        else:
            continue
        while pos > 0 and _before(s, i, best_s[pos - 1], best_i[pos - 1]):
            best_s[pos] = best_s[pos - 1]
            best_i[pos] = best_i[pos - 1]
            pos -= 1
        best_s[pos] = s
        best_i[pos] = i


def topk_inner_product(const double[:, ::1] mat, const double[::1] query, Py_ssize_t k):
    """Exact top-k rows of ``mat`` by inner product with ``query``."""
    if mat.shape[1] != query.shape[0]:
        raise ValueError("dimension mismatch between archive and query")
    cdef Py_ssize_t kk = min(k, mat.shape[0])
    scores = np.empty(kk, dtype=np.float64)
    idx = np.empty(kk, dtype=np.intp)
    cdef double[::1] s_view = scores
    cdef Py_ssize_t[::1] i_view = idx
    cdef Py_ssize_t filled = 0
    if kk > 0:
        with nogil:
            _scan(mat, query, kk, &s_view[0], &i_view[0], &filled)
    return idx, scores


def topk_inner_product_batch(const double[:, ::1] mat, const double[:, ::1] queries, Py_ssize_t k):
    if mat.shape[1] != queries.shape[1]:
        raise ValueError("dimension mismatch between archive and queries")
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t kk = min(k, mat.shape[0])
    scores = np.empty((nq, kk), dtype=np.float64)
    idx = np.empty((nq, kk), dtype=np.intp)
    cdef double[:, ::1] s_view = scores
    cdef Py_ssize_t[:, ::1] i_view = idx
    cdef Py_ssize_t r, filled = 0
    if kk > 0:
        with nogil:
            for r in range(nq):
                _scan(mat, queries[r], kk, &s_view[r, 0], &i_view[r, 0], &filled)
    return idx, scores


def mann_whitney_auc(const double[::1] scores, const long[::1] labels):
    """AUC as the Mann-Whitney statistic with mid-ranks for ties."""
    cdef Py_ssize_t n = scores.shape[0]
    if labels.shape[0] != n:
        raise ValueError("scores and labels differ in length")
    order = np.argsort(np.asarray(scores), kind="mergesort")
    cdef Py_ssize_t[::1] o = order.astype(np.intp)
    cdef Py_ssize_t i = 0, j, t
    cdef double n_pos = 0.0, n_neg = 0.0, rank_sum = 0.0, mid
    with nogil:
        for t in range(n):
            if labels[t] == 1:
                n_pos += 1.0
            else:
                n_neg += 1.0
        while i < n:
            j = i
            while j + 1 < n and scores[o[j + 1]] == scores[o[i]]:
                j += 1
            # 1-based mid-rank of the tie block [i, j]
            mid = (i + j + 2) * 0.5
            for t in range(i, j + 1):
                if labels[o[t]] == 1:
                    rank_sum += mid
            i = j + 1
    if n_pos == 0.0 or n_neg == 0.0:
        raise ValueError("AUC needs both classes")
    return (rank_sum - n_pos * (n_pos + 1.0) * 0.5) / (n_pos * n_neg)


def adamw_update(double[::1] param, const double[::1] grad, double[::1] m, double[::1] v,
                 double decay, double beta1, double beta2, double sqrt_bc2,
                 double eps, double step_size):
    """Fused in-place AdamW update over flat float64 buffers."""
    cdef Py_ssize_t i, n = param.shape[0]
    cdef double g, denom
    if grad.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("buffer length mismatch")
    with nogil:
        for i in range(n):
            g = grad[i]
            param[i] = param[i] * decay
            m[i] = m[i] * beta1 + (1.0 - beta1) * g
            v[i] = v[i] * beta2 + (1.0 - beta2) * (g * g)
            denom = sqrt(v[i]) / sqrt_bc2 + eps
            param[i] = param[i] - step_size * (m[i] / denom)

