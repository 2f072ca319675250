"""Siamese trajectory encoder: shared backbone, difference projection, joint loss, training."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffkernel as dk
from ._split import stratified_holdout
from .diffkernel import OptimizerConfig, Parameter, Tensor
from .errors import ConfigError, LeakageError, ShapeError
from .synthdata import SubjectRecord, preprocess

UNIT_NORM_TOL = 1e-6


@dataclass
class AugmentationConfig:
    flip_probability: float = 0.5
    noise_sigma: tuple[float, float] = (0.02, 0.08)
    intensity_scale: tuple[float, float] = (0.85, 1.15)

    def validate(self):
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ConfigError("flip_probability: must be in [0, 1]")
        for name in ("noise_sigma", "intensity_scale"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f"{name}: range must be ordered and non-negative")


@dataclass
class EncoderConfig:
    volume_dim: int = 16
    backbone_hidden: int = 256
    feature_dim: int = 2048
    projection_hidden: int = 512
    trajectory_dim: int = 512
    class_head: tuple[int, ...] = (256, 128)
    dropout: float = 0.3
    temperature: float = 0.07
    focal_gamma: float = 2.0
    focal_alpha: float = 0.75
    positive_weight: float = 4.0
    epochs: int = 50
    micro_batch: int = 2
    # BN statistics over the whole effective batch instead of per micro-batch
    direct_batch: bool = True
    use_batchnorm: bool = True
    val_fraction: float = 0.2
    augment: bool = True
    seed: int = 42
    # dense layers take input / sqrt(fan_in) with unit-scale weights, which keeps
    # per-coordinate Adam steps small relative to activations on wide inputs
    fan_in_scaling: bool = False
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def validate(self):
        if not self.temperature > 0:
            raise ConfigError("temperature: must be > 0")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma: must be >= 0")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ConfigError("focal_alpha: must be in (0, 1)")
        if self.trajectory_dim < 2:
            raise ConfigError("trajectory_dim: must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs: must be >= 0")
        if self.micro_batch < 1:
            raise ConfigError("micro_batch: must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction: must be in (0, 1)")
        self.optimizer.validate()
        self.augmentation.validate()

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.optimizer.accumulation_steps

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "EncoderConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        opt = data.pop("optimizer", {})
        aug = data.pop("augmentation", {})
        if isinstance(opt, dict):
            bad = set(opt) - set(OptimizerConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown optimizer keys: {sorted(bad)}")
            opt = OptimizerConfig(**opt)
        if isinstance(aug, dict):
            bad = set(aug) - set(AugmentationConfig.__dataclass_fields__)
            if bad:
                raise ConfigError(f"unknown augmentation keys: {sorted(bad)}")
            aug = AugmentationConfig(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in aug.items()})
        if "class_head" in data:
            data["class_head"] = tuple(data["class_head"])
        return cls(optimizer=opt, augmentation=aug, **data)


@dataclass
class TrajectoryVector:
    values: np.ndarray
    subject_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("trajectory must be a vector")
        norm = float(np.linalg.norm(self.values))
        if abs(norm - 1.0) > UNIT_NORM_TOL:
            raise ShapeError(f"trajectory {self.subject_id!r} has norm {norm:.9f}, expected 1")


# ---------------------------------------------------------------- losses

def supcon_loss(z: Tensor, labels, temperature: float) -> Tensor:
    """Supervised contrastive loss summed over anchors that have a positive partner."""
    labels = np.asarray(labels)
    n = z.shape[0]
    if n < 2:
        raise ShapeError("supcon_loss needs a batch of at least 2")
    if labels.shape != (n,):
        raise ShapeError("labels do not match the batch")
    others = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & others
    n_pos = pos.sum(axis=1)
    if not np.any(n_pos):
        raise ShapeError("no sample in the batch has a positive partner")
    sim = dk.matmul(z, dk.transpose(z)) * (1.0 / temperature)
    lse = dk.logsumexp(sim, axis=1, mask=others)
    log_prob = sim - dk.reshape(lse, (n, 1))
    weights = np.where(pos, 1.0 / np.maximum(n_pos, 1)[:, None], 0.0)
    return -dk.sum(log_prob * weights)


def focal_loss(logits: Tensor, labels, gamma: float, alpha: float | None,
               class_weight: float = 1.0) -> Tensor:
    """Mean binary focal loss on sigmoid logits.

    ``alpha=None`` gives every sample alpha_t = 1. Positives are additionally
    scaled by ``class_weight``.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    sign = 2.0 * labels - 1.0
    signed = logits * sign
    log_pt = dk.log_sigmoid(signed)
    if alpha is None:
        alpha_t = np.ones_like(labels)
    else:
        alpha_t = np.where(labels == 1, alpha, 1.0 - alpha)
    weight = alpha_t * np.where(labels == 1, class_weight, 1.0)
    per_sample = log_pt * (-weight)
    if gamma != 0.0:
        modulating = dk.exp(dk.log_sigmoid(-signed) * gamma)
        per_sample = per_sample * modulating
    return dk.mean(per_sample)


def joint_loss(supcon: Tensor, focal: Tensor) -> Tensor:
    return supcon * 0.5 + focal * 0.5


# ---------------------------------------------------------------- augmentation

def augment_pair(pre: np.ndarray, post: np.ndarray, config: AugmentationConfig,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One draw of (flip axes, noise sigma, scale) applied to both scans."""
    axes = [a for a in range(3) if rng.random() < config.flip_probability]
    sigma = rng.uniform(*config.noise_sigma)
    scale = rng.uniform(*config.intensity_scale)
    out = []
    for v in (pre, post):
        if axes:
            v = np.flip(v, axis=axes)
        v = v * scale + rng.normal(0.0, sigma, size=v.shape)
        out.append(np.ascontiguousarray(v))
    return out[0], out[1]


# ---------------------------------------------------------------- network

def _gaussian_layer(rng, fan_in, fan_out, name, scaled=False):
    # scaled layers multiply their input by 1/sqrt(fan_in) at run time instead
    std = math.sqrt(2.0) if scaled else math.sqrt(2.0 / fan_in)
    w = Parameter(rng.normal(0.0, std, size=(fan_in, fan_out)), f"{name}.w")
    b = Parameter(rng.normal(0.0, 0.01, size=fan_out), f"{name}.b")
    return w, b


class SiameseEncoder:
    """Shared-weight backbone plus projection head; the classification head is training-only.

    ``branch_t0`` and ``branch_t1`` are the same backbone object, so both
    timepoints read one parameter storage.
    """

    def __init__(self, config: EncoderConfig, seed: int | None = None):
        config.validate()
        self.config = config
        rng = np.random.default_rng([config.seed if seed is None else seed, 7])
        c = config
        n_in = c.volume_dim ** 3
        self.params: dict[str, Parameter] = {}
        for name, (a, b) in {
            "backbone.0": (n_in, c.backbone_hidden),
            "backbone.1": (c.backbone_hidden, c.feature_dim),
            "proj.0": (c.feature_dim, c.projection_hidden),
            "proj.1": (c.projection_hidden, c.trajectory_dim),
        }.items():
            self.params[f"{name}.w"], self.params[f"{name}.b"] = _gaussian_layer(
                rng, a, b, name, c.fan_in_scaling)
        self.params["proj.bn.gamma"] = Parameter(np.ones(c.projection_hidden), "proj.bn.gamma")
        self.params["proj.bn.beta"] = Parameter(np.zeros(c.projection_hidden), "proj.bn.beta")
        widths = (c.trajectory_dim, *c.class_head, 1)
        for i in range(len(widths) - 1):
            name = f"head.{i}"
            self.params[f"{name}.w"], self.params[f"{name}.b"] = _gaussian_layer(
                rng, widths[i], widths[i + 1], name, c.fan_in_scaling)
        self.bn = dk.BatchNormState.fresh(c.projection_hidden)
        self.branch_t0 = self.branch_t1 = self._backbone

    # parameters
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def encoder_parameters(self) -> list[Parameter]:
        return [p for k, p in self.params.items() if not k.startswith("head.")]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: p.data.copy() for k, p in self.params.items()}
        state["proj.bn.running_mean"] = self.bn.running_mean.copy()
        state["proj.bn.running_var"] = self.bn.running_var.copy()
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in state:
                raise ConfigError(f"checkpoint lacks tensor {k!r}")
            if state[k].shape != p.shape:
                raise ShapeError(f"{k}: checkpoint shape {state[k].shape} vs {p.shape}")
            p.data[...] = state[k]
        self.bn.running_mean = state["proj.bn.running_mean"].copy()
        self.bn.running_var = state["proj.bn.running_var"].copy()

    def save(self, path):
        dk.save_checkpoint(path, self.state_dict(), self.config.to_dict(), "encoder")

    @classmethod
    def load(cls, path) -> "SiameseEncoder":
        tensors, cfg, kind = dk.load_checkpoint(path)
        if kind != "encoder":
            raise ConfigError(f"{path}: holds a {kind!r} model, not an encoder")
        enc = cls(EncoderConfig.from_dict(cfg))
        enc.load_state_dict(tensors)
        return enc

    # forward
    def _dense(self, x: Tensor, name: str) -> Tensor:
        w = self.params[f"{name}.w"]
        if self.config.fan_in_scaling:
            x = x * (1.0 / math.sqrt(w.shape[0]))
        return dk.dense(x, w, self.params[f"{name}.b"])

    def _backbone(self, x: Tensor) -> Tensor:
        h = dk.relu(self._dense(x, "backbone.0"))
        return dk.relu(self._dense(h, "backbone.1"))

    def _project(self, diff: Tensor, training: bool, rng, bn_groups: int | None = None) -> Tensor:
        p = self.params
        c = self.config
        h = self._dense(diff, "proj.0")
        if c.use_batchnorm:
            h = dk.batchnorm(h, p["proj.bn.gamma"], p["proj.bn.beta"], self.bn, training,
                             group_size=bn_groups)
        h = dk.relu(h)
        h = dk.dropout(h, c.dropout, training, rng)
        return self._dense(h, "proj.1")

    def forward(self, pre: np.ndarray, post: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None,
                bn_groups: int | None = None) -> Tensor:
        """Trajectory vectors for flattened ``(n, d^3)`` pre/post batches.

        In training mode the projection head runs per group of ``bn_groups``
        rows so batch-norm statistics follow the physical micro-batch.
        """
        pre = np.asarray(pre, dtype=np.float64)
        post = np.asarray(post, dtype=np.float64)
        n_in = self.config.volume_dim ** 3
        if pre.ndim != 2 or pre.shape != post.shape or pre.shape[1] != n_in:
            raise ShapeError(f"expected pre/post batches of shape (n, {n_in})")
        v_t0 = self.branch_t0(Tensor(pre))
        v_t1 = self.branch_t1(Tensor(post))
        diff = v_t1 - v_t0
        return dk.l2_normalize(self._project(diff, training, rng, bn_groups))

    def class_logits(self, traj: Tensor) -> Tensor:
        n_layers = len(self.config.class_head) + 1
        h = traj
        for i in range(n_layers):
            h = self._dense(h, f"head.{i}")
            if i < n_layers - 1:
                h = dk.relu(h)
        return dk.reshape(h, (h.shape[0],))

    # inference
    def encode_batch(self, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
        with dk.no_grad():
            return self.forward(pre, post, training=False).data

    def encode_pair(self, pre: np.ndarray, post: np.ndarray, subject_id: str = "") -> TrajectoryVector:
        """Trajectory vector of one preprocessed pre/post volume pair (inference mode)."""
        d = self.config.volume_dim
        if pre.shape != (d, d, d) or post.shape != (d, d, d):
            raise ShapeError(f"volumes must be {d}^3, got {pre.shape} and {post.shape}")
        out = self.encode_batch(pre.reshape(1, -1), post.reshape(1, -1))
        return TrajectoryVector(out[0], subject_id)

    def embed_records(self, records: Sequence[SubjectRecord], batch: int = 64) -> np.ndarray:
        pre, post = preprocess_records(records, self.config.volume_dim)
        out = [self.encode_batch(pre[s:s + batch], post[s:s + batch])
               for s in range(0, len(records), batch)]
        if not out:
            return np.zeros((0, self.config.trajectory_dim))
        return np.concatenate(out, axis=0)


def preprocess_records(records: Sequence[SubjectRecord], dim: int) -> tuple[np.ndarray, np.ndarray]:
    """Z-score and crop/pad every scan, flattened to ``(n, dim^3)``."""
    n = len(records)
    pre = np.empty((n, dim ** 3))
    post = np.empty((n, dim ** 3))
    for i, r in enumerate(records):
        pre[i] = preprocess(r.pre_volume, dim).ravel()
        post[i] = preprocess(r.post_volume, dim).ravel()
    return pre, post


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    encoder: SiameseEncoder
    history: list[dict]
    best_epoch: int | None
    train_ids: list[str]
    val_ids: list[str]


def _batch_loss(enc: SiameseEncoder, pre, post, labels, training, rng, bn_groups):
    c = enc.config
    traj = enc.forward(pre, post, training=training, rng=rng, bn_groups=bn_groups)
    sc = supcon_loss(traj, labels, c.temperature)
    fl = focal_loss(enc.class_logits(traj), labels, c.focal_gamma, c.focal_alpha,
                    c.positive_weight)
    return joint_loss(sc, fl), sc, fl


def _balanced_batches(labels: np.ndarray, batch: int, rng: np.random.Generator):
    """Index batches for one epoch with at least two members of each class per batch."""
    n = labels.size
    pos_pool = np.flatnonzero(labels == 1)
    neg_pool = np.flatnonzero(labels == 0)
    batch = min(batch, n)
    n_pos = int(round(batch * pos_pool.size / n))
    n_pos = min(max(2, n_pos), batch - 2, pos_pool.size if pos_pool.size >= 2 else 2)
    n_neg = batch - n_pos
    n_batches = max(1, math.ceil(n / batch))

    def cycle(pool, k_total):
        out = []
        while len(out) < k_total:
            out.extend(pool[rng.permutation(pool.size)].tolist())
        return out[:k_total]

    pos = cycle(pos_pool, n_pos * n_batches)
    neg = cycle(neg_pool, n_neg * n_batches)
    for b in range(n_batches):
        idx = np.array(pos[b * n_pos:(b + 1) * n_pos] + neg[b * n_neg:(b + 1) * n_neg])
        yield idx[rng.permutation(idx.size)]


def train_encoder(records: Sequence[SubjectRecord], config: EncoderConfig,
                  held_out_ids: Sequence[str] = (), log_path=None,
                  initial: SiameseEncoder | None = None) -> TrainResult:
    """Train on ``records`` and return the checkpoint with minimum validation loss.

    Any subject listed in ``held_out_ids`` aborts training with ``LeakageError``.
    """
    config.validate()
    held = set(held_out_ids)
    for r in records:
        if r.subject_id in held:
            raise LeakageError(r.subject_id, "encoder training data")
    labels = np.array([r.label for r in records])
    if labels.size == 0 or np.all(labels == labels[0]):
        raise ConfigError("training data must contain both classes")
    if min(np.sum(labels == 0), np.sum(labels == 1)) < 2:
        raise ConfigError("each class needs at least two training subjects")

    enc = initial if initial is not None else SiameseEncoder(config)
    ids = [r.subject_id for r in records]
    if config.epochs == 0:
        return TrainResult(enc, [], None, ids, [])

    rng = np.random.default_rng([config.seed, 11])
    fit_idx, val_idx = stratified_holdout(labels, config.val_fraction, rng)
    pre_all, post_all = preprocess_records(records, config.volume_dim)
    d = config.volume_dim
    fit_labels = labels[fit_idx]
    val_pre, val_post, val_labels = pre_all[val_idx], post_all[val_idx], labels[val_idx]

    opt = dk.AdamW(enc.parameters(), config.optimizer)
    bn_groups = None if config.direct_batch else config.micro_batch
    history = []
    best_loss, best_epoch, best_state = math.inf, None, enc.state_dict()
    log_fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(config.epochs):
            losses, sc_sum, fl_sum, n_batches = 0.0, 0.0, 0.0, 0
            for batch in _balanced_batches(fit_labels, config.effective_batch, rng):
                rows = fit_idx[batch]
                pre, post = pre_all[rows], post_all[rows]
                if config.augment:
                    pre = pre.copy()
                    post = post.copy()
                    for i in range(rows.size):
                        a, b = augment_pair(pre[i].reshape(d, d, d), post[i].reshape(d, d, d),
                                            config.augmentation, rng)
                        pre[i], post[i] = a.ravel(), b.ravel()
                opt.zero_grad()
                loss, sc, fl = _batch_loss(enc, pre, post, labels[rows], True, rng, bn_groups)
                loss.backward()
                lr = opt.step(epoch)
                losses += loss.item()
                sc_sum += sc.item()
                fl_sum += fl.item()
                n_batches += 1
            with dk.no_grad():
                val, _, _ = _batch_loss(enc, val_pre, val_post, val_labels, False, None, None)
            row = {
                "epoch": epoch,
                "lr": lr,
                "train_loss": losses / n_batches,
                "val_loss": val.item(),
                "supcon": sc_sum / n_batches,
                "focal": fl_sum / n_batches,
            }
            history.append(row)
            if log_fh:
                log_fh.write(json.dumps(row) + "\n")
            if row["val_loss"] < best_loss:
                best_loss, best_epoch, best_state = row["val_loss"], epoch, enc.state_dict()
    finally:
        if log_fh:
            log_fh.close()
    enc.load_state_dict(best_state)
    return TrainResult(enc, history, best_epoch,
                       [ids[i] for i in fit_idx], [ids[i] for i in val_idx])
