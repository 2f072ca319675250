"""A small define-by-run reverse-mode autodiff kernel over float64 numpy arrays.

Only what the trajectory encoder and the MLP classifier need: dense layers,
ReLU, dropout, batch normalisation, row-wise L2 normalisation, broadcasting
arithmetic, reductions, AdamW with a cosine schedule and global-norm clipping.

Gradients of leaf tensors accumulate across ``backward`` calls until
``zero_grad`` is called.
"""
from __future__ import annotations

import contextlib
import json
import math
import os
import tempfile
import threading
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ConfigError, NonFiniteError, ParseError, ShapeError

# per-thread, so concurrent folds can train while others run inference
_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def backward(self):
        """Reverse-mode sweep from this scalar; accumulates into leaf ``grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


class Parameter(Tensor):
    """Trainable leaf tensor; optimiser moments live in ``state``."""

    __slots__ = ("state",)

    def __init__(self, data, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.state: dict = {}


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {op}")


def _node(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled() and any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shapes(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shapes(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _node(out, (x,), lambda g: (g / x.data,), "log")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _node(out, (x,), lambda g: (g * _sigmoid(-z),), "log_sigmoid")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError("dropout probability must be in [0, 1)")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _node(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(x: Tensor) -> Tensor:
    return _node(x.data.T, (x,), lambda g: (g.T,), "transpose")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias {b.shape} does not match weight {w.shape}")
    out = matmul(x, w)
    return add(out, b) if b is not None else out


# ---------------------------------------------------------------- reductions and shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), back, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp along ``axis``; entries where ``mask`` is False are excluded."""
    z = x.data
    if mask is None:
        mask = np.ones(z.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    if not np.all(mask.any(axis=axis)):
        raise ShapeError("logsumexp: a slice has no included entries")
    m = np.max(np.where(mask, z, -np.inf), axis=axis, keepdims=True)
    e = np.where(mask, np.exp(np.where(mask, z - m, 0.0)), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s
    return _node(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), back, "take_rows")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# ---------------------------------------------------------------- normalisation

def l2_normalize(x: Tensor) -> Tensor:
    """Divide each row (or a 1-D vector) by its Euclidean norm."""
    z = x.data
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm == 0.0):
        raise ShapeError("l2_normalize: zero-norm input")
    y = z / norm

    def back(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _node(y, (x,), back, "l2_normalize")


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, n: int) -> "BatchNormState":
        return cls(np.zeros(n), np.ones(n))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
              training: bool, group_size: int | None = None) -> Tensor:
    """Batch normalisation over axis 0.

    Training mode normalises with batch statistics and updates the running
    estimates in ``state`` (unbiased variance); inference uses the running
    estimates only. With ``group_size`` the rows are normalised in consecutive
    groups, each updating the running estimates in turn, exactly as separate
    physical micro-batches would.
    """
    z = x.data
    if z.ndim != 2 or z.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: input {x.shape} vs {gamma.shape[0]} features")
    eps = state.eps
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (z - state.running_mean) * inv
        out = gamma.data * xhat + beta.data
        return _node(out, (x, gamma, beta),
                     lambda g: (g * gamma.data * inv, (g * xhat).sum(0), g.sum(0)),
                     "batchnorm")
    n_rows = z.shape[0]
    step = group_size or n_rows
    bounds = [(s, min(s + step, n_rows)) for s in range(0, n_rows, step)]
    xhat = np.empty_like(z)
    invs = []
    m = state.momentum
    for lo, hi in bounds:
        part = z[lo:hi]
        n = hi - lo
        mu = part.mean(axis=0)
        var = part.var(axis=0)
        inv = 1.0 / np.sqrt(var + eps)
        xhat[lo:hi] = (part - mu) * inv
        invs.append(inv)
        unbiased = var * n / (n - 1) if n > 1 else var
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * unbiased
    out = gamma.data * xhat + beta.data

    def back(g):
        dxhat = g * gamma.data
        dx = np.empty_like(z)
        for (lo, hi), inv in zip(bounds, invs):
            n = hi - lo
            dh, xh = dxhat[lo:hi], xhat[lo:hi]
            dx[lo:hi] = inv / n * (n * dh - dh.sum(0) - xh * (dh * xh).sum(0))
        return dx, (g * xhat).sum(0), g.sum(0)

    return _node(out, (x, gamma, beta), back, "batchnorm")


# ---------------------------------------------------------------- optimisation

@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    cosine_t_max: int = 50
    clip_norm: float = 1.0
    accumulation_steps: int = 8

    def validate(self):
        for name in ("learning_rate", "epsilon", "cosine_t_max", "clip_norm",
                     "accumulation_steps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay: must be >= 0")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name}: must be in [0, 1)")


def cosine_lr(config: OptimizerConfig, epoch: int) -> float:
    """Cosine-annealed rate for ``epoch`` (0-based), reaching 0 at ``cosine_t_max``."""
    return 0.5 * config.learning_rate * (1.0 + math.cos(math.pi * epoch / config.cosine_t_max))


def global_grad_norm(params: Iterable[Parameter]) -> float:
    return math.sqrt(math.fsum(float(np.dot(p.grad.ravel(), p.grad.ravel())) for p in params))


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = global_grad_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            p.grad *= scale
    return norm


class AdamW:
    """Adam with decoupled weight decay; the learning rate follows ``cosine_lr``."""

    def __init__(self, params: Sequence[Parameter], config: OptimizerConfig):
        config.validate()
        self.params = list(params)
        self.config = config

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, epoch: int) -> float:
        c = self.config
        norm = clip_grad_norm(self.params, c.clip_norm)
        if not math.isfinite(norm):
            raise NonFiniteError("non-finite gradient norm")
        lr = cosine_lr(c, epoch)
        for p in self.params:
            g = p.grad
            st = p.state
            if not st:
                st["t"] = 0
                st["m"] = np.zeros_like(p.data)
                st["v"] = np.zeros_like(p.data)
            st["t"] += 1
            t = st["t"]
            kernels.adamw_update(
                p.data.reshape(-1), g.reshape(-1), st["m"].reshape(-1), st["v"].reshape(-1),
                1.0 - lr * c.weight_decay, c.beta1, c.beta2,
                math.sqrt(1.0 - c.beta2 ** t), c.epsilon, lr / (1.0 - c.beta1 ** t),
            )
        return lr


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "trajoracle-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict | None = None,
                    model_type: str = "encoder") -> None:
    """Named float64 tensor table plus a JSON config echo, written atomically as ``.npz``."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_type": model_type,
        "config": config or {},
    }
    arrays = {f"t:{k}": np.asarray(v, dtype=np.float64) for k, v in tensors.items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, str]:
    """Returns ``(tensors, config, model_type)``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            tensors = {k[2:]: z[k].copy() for k in z.files if k.startswith("t:")}
    except (OSError, ValueError, KeyError) as exc:
        raise ParseError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    return tensors, meta["config"], meta["model_type"]


def config_dict(cfg) -> dict:
    return asdict(cfg)
