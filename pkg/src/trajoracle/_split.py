"""Seeded stratified splitting helpers shared by training loops."""
import numpy as np


def stratified_holdout(labels, fraction: float, rng: np.random.Generator):
    """Index arrays ``(keep, held)`` with ``fraction`` of each class held out (at least one)."""
    labels = np.asarray(labels)
    keep, held = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_held = min(max(1, int(round(fraction * idx.size))), idx.size - 1)
        held.extend(idx[:n_held].tolist())
        keep.extend(idx[n_held:].tolist())
    return np.array(sorted(keep), dtype=int), np.array(sorted(held), dtype=int)
