"""Pure numpy versions of the compiled kernels (same arithmetic order)."""
import numpy as np


def _scores(mat, queries):
    # sequential accumulation over the feature axis, vectorised over rows
    out = np.zeros((queries.shape[0], mat.shape[0]))
    for j in range(mat.shape[1]):
        out += queries[:, j, None] * mat[None, :, j]
    return out


def topk_inner_product_batch(mat, queries, k):
    mat = np.ascontiguousarray(mat, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.float64)
    if mat.ndim != 2 or queries.ndim != 2 or mat.shape[1] != queries.shape[1]:
        raise ValueError("dimension mismatch between archive and queries")
    kk = min(k, mat.shape[0])
    scores = _scores(mat, queries)
    rows = np.arange(mat.shape[0])
    idx = np.empty((queries.shape[0], kk), dtype=np.intp)
    for r in range(queries.shape[0]):
        idx[r] = np.lexsort((rows, -scores[r]))[:kk]
    return idx, np.take_along_axis(scores, idx, axis=1)


def topk_inner_product(mat, query, k):
    query = np.asarray(query, dtype=np.float64)
    if query.ndim != 1:
        raise ValueError("query must be a vector")
    idx, scores = topk_inner_product_batch(mat, query[None, :], k)
    return idx[0], scores[0]


def mann_whitney_auc(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.shape != scores.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = float(np.sum(labels == 1))
    n_neg = float(labels.size) - n_pos
    if n_pos == 0.0 or n_neg == 0.0:
        raise ValueError("AUC needs both classes")
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    # tie blocks -> 1-based mid-ranks
    starts = np.flatnonzero(np.r_[True, sorted_scores[1:] != sorted_scores[:-1]])
    ends = np.r_[starts[1:], scores.size] - 1
    mids = (starts + ends + 2) * 0.5
    block = np.repeat(np.arange(starts.size), ends - starts + 1)
    ranks = mids[block]
    rank_sum = 0.0
    for r in ranks[labels[order] == 1]:
        rank_sum += r
    return (rank_sum - n_pos * (n_pos + 1.0) * 0.5) / (n_pos * n_neg)


def adamw_update(param, grad, m, v, decay, beta1, beta2, sqrt_bc2, eps, step_size):
    param *= decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    denom = np.sqrt(v)
    denom /= sqrt_bc2
    denom += eps
    param -= step_size * (m / denom)

