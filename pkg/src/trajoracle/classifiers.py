"""Baseline classifiers over frozen trajectory vectors, plus an equal-weight soft vote."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import diffkernel as dk
from . import kernels
from ._split import stratified_holdout
from .diffkernel import AdamW, OptimizerConfig, Parameter, Tensor
from .errors import ConfigError, ParseError, ShapeError


class NotFittedError(ShapeError):
    pass


def _features(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-d feature matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ShapeError("features contain non-finite values")
    return x


def _binary_labels(y, n) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ConfigError("labels must be 0/1")
    return y.astype(np.int64)


def _require_both(y):
    if y.min() == y.max():
        raise ConfigError("training set must contain both classes")


def balanced_weights(y: np.ndarray) -> np.ndarray:
    """n / (2 n_c) for each sample's class."""
    n = y.size
    counts = np.bincount(y, minlength=2).astype(np.float64)
    return n / (2.0 * counts[y])


class Classifier:
    model_type = "classifier"

    def fit(self, x, y):
        raise NotImplementedError

    def predict_proba(self, x) -> np.ndarray:
        raise NotImplementedError

    def _check_fitted(self):
        if not getattr(self, "fitted", False):
            raise NotFittedError(f"{type(self).__name__} used before fit")

    # snapshots via the checkpoint format
    def _state(self) -> tuple[dict, dict]:
        raise NotImplementedError

    def save(self, path):
        self._check_fitted()
        tensors, cfg = self._state()
        dk.save_checkpoint(path, tensors, cfg, self.model_type)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ShapeError("zero vector cannot be compared by cosine")
    if np.all(np.abs(norms - 1.0) <= 1e-12):
        return x  # already unit: keep bits so results match the archive scan
    return x / norms[:, None]


def knn_k(n_train: int, k_max: int = 5) -> int:
    return max(1, min(k_max, n_train // 2))


class KNNClassifier(Classifier):
    """Cosine k-NN; p(y=1) is the positive fraction among the k nearest."""

    model_type = "classifier:knn"

    def __init__(self, k_max: int = 5):
        if k_max < 1:
            raise ConfigError("k_max: must be >= 1")
        self.k_max = k_max
        self.fitted = False

    def fit(self, x, y):
        x = _features(x)
        if x.shape[0] == 0:
            raise ConfigError("k-NN needs a nonempty training set")
        self.x = _unit_rows(x)
        self.y = _binary_labels(y, x.shape[0])
        self.k = knn_k(x.shape[0], self.k_max)
        self.fitted = True
        return self

    def predict_proba(self, x) -> np.ndarray:
        self._check_fitted()
        q = _unit_rows(_features(x))
        idx, _ = kernels.topk_inner_product_batch(self.x, q, self.k)
        return self.y[idx].sum(axis=1) / idx.shape[1]

    def _state(self):
        return {"x": self.x, "y": self.y}, {"k_max": self.k_max}


class LogisticRegression(Classifier):
    """Balanced-class logistic regression fitted by gradient descent with backtracking.

    Objective: mean_i s_i * nll_i + ||w||^2 / (2C), bias unpenalised.
    """

    model_type = "classifier:logreg"

    def __init__(self, C: float = 1.0, max_iter: int = 1000, tol: float = 1e-6):
        if not C > 0:
            raise ConfigError("C: must be > 0")
        self.C, self.max_iter, self.tol = C, max_iter, tol
        self.fitted = False

    def _objective(self, theta, x, y, s):
        w, b = theta[:-1], theta[-1]
        z = x @ w + b
        # nll = log(1 + e^z) - y z, computed stably
        nll = np.logaddexp(0.0, z) - y * z
        f = float(np.mean(s * nll)) + float(w @ w) / (2.0 * self.C)
        r = s * (_sigmoid(z) - y) / y.size
        g = np.empty_like(theta)
        g[:-1] = x.T @ r + w / self.C
        g[-1] = r.sum()
        return f, g

    def fit(self, x, y):
        x = _features(x)
        y = _binary_labels(y, x.shape[0])
        _require_both(y)
        s = balanced_weights(y)
        yf = y.astype(np.float64)
        theta = np.zeros(x.shape[1] + 1)
        f, g = self._objective(theta, x, yf, s)
        step = 1.0
        self.n_iter = 0
        for it in range(self.max_iter):
            gnorm = float(np.linalg.norm(g))
            if gnorm < self.tol:
                break
            while True:
                cand = theta - step * g
                fc, gc = self._objective(cand, x, yf, s)
                if fc <= f - 0.5 * step * gnorm * gnorm or step < 1e-12:
                    break
                step *= 0.5
            theta, f, g = cand, fc, gc
            step = min(step * 2.0, 1e3)
            self.n_iter = it + 1
        self.coef_, self.intercept_ = theta[:-1].copy(), float(theta[-1])
        self.grad_norm_ = float(np.linalg.norm(g))
        self.fitted = True
        return self

    def predict_proba(self, x) -> np.ndarray:
        self._check_fitted()
        return _sigmoid(_features(x) @ self.coef_ + self.intercept_)

    def _state(self):
        return ({"coef": self.coef_, "intercept": np.array([self.intercept_])},
                {"C": self.C, "max_iter": self.max_iter, "tol": self.tol})


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class MLPClassifier(Classifier):
    """ReLU MLP with one logit, balanced weighted cross-entropy and early stopping."""

    model_type = "classifier:mlp"

    def __init__(self, hidden: Sequence[int] = (256, 128), alpha: float = 1e-3, seed: int = 0,
                 max_epochs: int = 200, patience: int = 10, learning_rate: float = 1e-3,
                 batch_size: int = 200, val_fraction: float = 0.2):
        if alpha < 0 or patience < 1 or max_epochs < 0 or batch_size < 1:
            raise ConfigError("invalid MLP hyperparameters")
        self.hidden = tuple(int(h) for h in hidden)
        self.alpha, self.seed = alpha, seed
        self.max_epochs, self.patience = max_epochs, patience
        self.learning_rate, self.batch_size = learning_rate, batch_size
        self.val_fraction = val_fraction
        self.fitted = False

    def _init(self, d, rng):
        widths = (d, *self.hidden, 1)
        self.layers = []
        for i in range(len(widths) - 1):
            # Glorot-uniform, as common MLP libraries do for ReLU nets of this size
            lim = math.sqrt(6.0 / (widths[i] + widths[i + 1]))
            w = Parameter(rng.uniform(-lim, lim, size=(widths[i], widths[i + 1])), f"l{i}.w")
            b = Parameter(rng.uniform(-lim, lim, size=widths[i + 1]), f"l{i}.b")
            self.layers.append((w, b))

    def _logits(self, x) -> Tensor:
        h = Tensor(x)
        for i, (w, b) in enumerate(self.layers):
            h = dk.dense(h, w, b)
            if i < len(self.layers) - 1:
                h = dk.relu(h)
        return dk.reshape(h, (x.shape[0],))

    def _loss(self, x, y, s, n_total) -> Tensor:
        z = self._logits(x)
        yf = y.astype(np.float64)
        # weighted BCE: -(y log s(z) + (1-y) log s(-z))
        nll = dk.sub(dk.mul(dk.log_sigmoid(z), -yf), dk.mul(dk.log_sigmoid(-z), 1.0 - yf))
        data = dk.mul(dk.sum(dk.mul(nll, s)), 1.0 / y.size)
        reg = None
        for w, _ in self.layers:
            sq = dk.sum(dk.mul(w, w))
            reg = sq if reg is None else dk.add(reg, sq)
        return dk.add(data, dk.mul(reg, 0.5 * self.alpha / n_total))

    def fit(self, x, y):
        x = _features(x)
        y = _binary_labels(y, x.shape[0])
        _require_both(y)
        rng = np.random.default_rng([self.seed, 3])
        self._init(x.shape[1], rng)
        self.n_epochs = 0
        self.best_epoch = -1
        if self.max_epochs == 0:
            self.fitted = True
            return self
        counts = np.bincount(y, minlength=2)
        if counts.min() >= 2:
            tr, va = stratified_holdout(y, self.val_fraction, rng)
        else:
            tr, va = np.arange(y.size), np.arange(y.size)
        s_all = balanced_weights(y)
        xt, yt, st = x[tr], y[tr], s_all[tr]
        xv, yv, sv = x[va], y[va], s_all[va]
        params = [p for layer in self.layers for p in layer]
        opt = AdamW(params, OptimizerConfig(learning_rate=self.learning_rate, weight_decay=0.0,
                                            cosine_t_max=10 ** 12, clip_norm=math.inf))
        best, best_state, wait = math.inf, None, 0
        bs = min(self.batch_size, yt.size)
        for epoch in range(self.max_epochs):
            order = rng.permutation(yt.size)
            for start in range(0, yt.size, bs):
                idx = order[start:start + bs]
                opt.zero_grad()
                self._loss(xt[idx], yt[idx], st[idx], yt.size).backward()
                opt.step(0)
            with dk.no_grad():
                val = self._loss(xv, yv, sv, yt.size).item()
            self.n_epochs = epoch + 1
            if val < best - 1e-4:
                best, wait, self.best_epoch = val, 0, epoch
                best_state = [p.data.copy() for p in params]
            else:
                wait += 1
                if wait >= self.patience:
                    break
        if best_state is not None:
            for p, d in zip(params, best_state):
                p.data[...] = d
        self.fitted = True
        return self

    def predict_proba(self, x) -> np.ndarray:
        self._check_fitted()
        with dk.no_grad():
            z = self._logits(_features(x)).data
        return _sigmoid(z)

    def _state(self):
        tensors = {}
        for i, (w, b) in enumerate(self.layers):
            tensors[f"l{i}.w"], tensors[f"l{i}.b"] = w.data, b.data
        return tensors, {"hidden": list(self.hidden), "alpha": self.alpha, "seed": self.seed,
                         "max_epochs": self.max_epochs, "patience": self.patience,
                         "learning_rate": self.learning_rate, "batch_size": self.batch_size,
                         "val_fraction": self.val_fraction}


class SoftVoteEnsemble(Classifier):
    model_type = "classifier:ensemble"

    def __init__(self, members: Sequence[Classifier]):
        if len(members) < 2:
            raise ConfigError("ensemble needs at least 2 members")
        self.members = list(members)
        self.fitted = False

    def fit(self, x, y):
        for m in self.members:
            m.fit(x, y)
        self.fitted = True
        return self

    def predict_proba(self, x) -> np.ndarray:
        for m in self.members:
            m._check_fitted()
        probs = np.stack([m.predict_proba(x) for m in self.members])
        return probs.mean(axis=0)

    def save(self, path):
        raise NotImplementedError("save ensemble members individually")


def default_ensemble() -> SoftVoteEnsemble:
    """M6-style members: k-NN, logistic regression and two MLP seeds."""
    return SoftVoteEnsemble([KNNClassifier(), LogisticRegression(),
                             MLPClassifier(seed=99), MLPClassifier(seed=123)])


def load_classifier(path) -> Classifier:
    tensors, cfg, model_type = dk.load_checkpoint(path)
    if model_type == KNNClassifier.model_type:
        m = KNNClassifier(**cfg)
        m.x, m.y = tensors["x"], tensors["y"].astype(np.int64)
        m.k = knn_k(m.x.shape[0], m.k_max)
    elif model_type == LogisticRegression.model_type:
        m = LogisticRegression(**cfg)
        m.coef_, m.intercept_ = tensors["coef"], float(tensors["intercept"][0])
    elif model_type == MLPClassifier.model_type:
        m = MLPClassifier(**cfg)
        n = len(m.hidden) + 1
        m.layers = [(Parameter(tensors[f"l{i}.w"]), Parameter(tensors[f"l{i}.b"]))
                    for i in range(n)]
    else:
        raise ParseError(f"{path}: model type {model_type!r} is not a classifier")
    m.fitted = True
    return m
