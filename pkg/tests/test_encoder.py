import json
from dataclasses import replace

import numpy as np
import pytest

from trajoracle.diffkernel import OptimizerConfig
from trajoracle.encoder import (AugmentationConfig, EncoderConfig, SiameseEncoder,
                                TrajectoryVector, _balanced_batches, _batch_loss, augment_pair,
                                train_encoder)
from trajoracle.errors import ConfigError, LeakageError, ShapeError
from trajoracle.synthdata import CohortSpec, generate_cohort

from conftest import check_grad

SMALL = dict(volume_dim=6, backbone_hidden=12, feature_dim=16, projection_hidden=10,
             trajectory_dim=8, class_head=(6, 4))


def small_config(**kw):
    return EncoderConfig(**{**SMALL, **kw})


def test_augment_identity_when_disabled(rng):
    cfg = AugmentationConfig(flip_probability=0.0, noise_sigma=(0.0, 0.0),
                             intensity_scale=(1.0, 1.0))
    a, b = rng.normal(size=(2, 4, 4, 4))
    x, y = augment_pair(a, b, cfg, np.random.default_rng(0))
    assert np.array_equal(x, a) and np.array_equal(y, b)


def test_augment_deterministic_per_seed(rng):
    a, b = rng.normal(size=(2, 4, 4, 4))
    cfg = AugmentationConfig()
    r1 = augment_pair(a, b, cfg, np.random.default_rng(5))
    r2 = augment_pair(a, b, cfg, np.random.default_rng(5))
    assert all(np.array_equal(u, v) for u, v in zip(r1, r2))


def test_augment_flips_both_on_same_axes(rng):
    cfg = AugmentationConfig(flip_probability=1.0, noise_sigma=(0.0, 0.0),
                             intensity_scale=(1.0, 1.0))
    a, b = rng.normal(size=(2, 3, 4, 5))
    x, y = augment_pair(a, b, cfg, np.random.default_rng(0))
    xx, yy = augment_pair(x, y, cfg, np.random.default_rng(0))
    assert np.array_equal(xx, a) and np.array_equal(yy, b)
    assert np.array_equal(x, a[::-1, ::-1, ::-1])


def test_trajectory_vector_checks_norm():
    TrajectoryVector(np.array([0.6, 0.8]), "a")
    with pytest.raises(ShapeError):
        TrajectoryVector(np.array([0.6, 0.7]), "a")


def test_config_round_trip_and_unknown_keys():
    cfg = small_config(dropout=0.1)
    assert EncoderConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ConfigError):
        EncoderConfig.from_dict({"no_such_key": 1})


def test_encoder_dimensions_default():
    c = EncoderConfig()
    enc = SiameseEncoder(replace(c, volume_dim=4))
    assert enc.params["proj.0.w"].shape == (2048, 512)
    assert enc.params["proj.1.w"].shape == (512, 512)
    assert enc.params["head.0.w"].shape == (512, 256)
    assert enc.params["head.2.w"].shape == (128, 1)


def test_shared_backbone_and_identical_inputs(rng):
    enc = SiameseEncoder(small_config())
    assert enc.branch_t0 == enc.branch_t1
    v = rng.normal(size=(6, 6, 6))
    t = enc.encode_pair(v, v, "same")
    assert abs(np.linalg.norm(t.values) - 1) < 1e-9


def test_inference_is_deterministic(rng):
    enc = SiameseEncoder(small_config())
    pre, post = rng.normal(size=(2, 3, 216))
    assert np.array_equal(enc.encode_batch(pre, post), enc.encode_batch(pre, post))


def test_full_joint_loss_gradients():
    for trial in range(4):
        cfg = small_config(dropout=0.2 if trial % 2 else 0.0, direct_batch=bool(trial % 2))
        enc = SiameseEncoder(cfg, seed=trial)
        rng = np.random.default_rng(trial)
        pre, post = rng.normal(size=(2, 4, 216))
        y = np.array([0, 1, 0, 1])
        groups = None if cfg.direct_batch else 2

        def loss():
            st = (enc.bn.running_mean.copy(), enc.bn.running_var.copy())
            out = _batch_loss(enc, pre, post, y, True, np.random.default_rng(9), groups)[0]
            enc.bn.running_mean, enc.bn.running_var = st
            return out

        assert check_grad(loss, enc.parameters()) < 1e-4


def test_balanced_batches_have_two_per_class():
    y = np.array([1] * 10 + [0] * 40)
    for idx in _balanced_batches(y, 16, np.random.default_rng(0)):
        assert (y[idx] == 1).sum() >= 2 and (y[idx] == 0).sum() >= 2
        assert idx.size == 16


def tiny_cohort(sep=6.0, n=40):
    return generate_cohort(CohortSpec(n_subjects=n, positive_fraction=0.3, volume_dim=6,
                                      class_separation=sep, seed=3))


def test_training_reduces_loss(tmp_path):
    recs = tiny_cohort()
    cfg = small_config(epochs=6, optimizer=OptimizerConfig(learning_rate=1e-3, cosine_t_max=6))
    res = train_encoder(recs, cfg, log_path=tmp_path / "log.jsonl")
    assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
    rows = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(rows) == 6 and set(rows[0]) == {"epoch", "lr", "train_loss", "val_loss",
                                               "supcon", "focal"}
    assert res.best_epoch == int(np.argmin([r["val_loss"] for r in rows]))


def test_training_is_deterministic():
    recs = tiny_cohort()
    cfg = small_config(epochs=2, optimizer=OptimizerConfig(cosine_t_max=2))
    a = train_encoder(recs, cfg).encoder.state_dict()
    b = train_encoder(recs, cfg).encoder.state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_training_refuses_held_out_subject():
    recs = tiny_cohort()
    with pytest.raises(LeakageError, match=recs[3].subject_id):
        train_encoder(recs, small_config(epochs=1), held_out_ids=[recs[3].subject_id])


def test_training_needs_both_classes():
    recs = [r for r in tiny_cohort() if r.label == 0]
    with pytest.raises(ConfigError):
        train_encoder(recs, small_config(epochs=1))


def test_save_load_round_trip(tmp_path, rng):
    enc = SiameseEncoder(small_config(), seed=4)
    enc.bn.running_mean[:] = rng.normal(size=10)
    enc.save(tmp_path / "e.npz")
    back = SiameseEncoder.load(tmp_path / "e.npz")
    pre, post = rng.normal(size=(2, 3, 216))
    assert np.array_equal(enc.encode_batch(pre, post), back.encode_batch(pre, post))
