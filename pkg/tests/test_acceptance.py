"""Acceptance checks, one per criterion.

Each test prints a ``[criterion N] PASS|FAIL`` line with its runtime, whatever the outcome.
The cross-validation criteria (4b, 7, 8, 9) train real encoders and take several minutes.
"""
import itertools
import json
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest

from trajoracle import diffkernel as dk
from trajoracle.archive import archive_from_arrays, search
from trajoracle.cli import main
from trajoracle.diffkernel import Tensor
from trajoracle.encoder import (EncoderConfig, SiameseEncoder, _batch_loss, focal_loss,
                                supcon_loss)
from trajoracle.errors import LeakageError
from trajoracle.evaluation import (EmbeddingCache, EvalConfig, FoldPlan, auc_roc,
                                   classification_metrics, method_predictions, plan_for_cohort,
                                   run_cv, stratified_kfold, threshold_grid)
from trajoracle.oracle import RuleBasedProvider, UNPARSEABLE, OracleConfig, predict
from trajoracle.synthdata import CohortSpec, generate_cohort, write_cohort

from conftest import check_grad
from test_diffkernel import CASES
from test_losses import supcon_bruteforce, unit_rows


@contextmanager
def criterion(capsys, number, title, budget=None):
    t0 = time.perf_counter()
    ok = False
    try:
        yield
        ok = True
    finally:
        elapsed = time.perf_counter() - t0
        over = budget is not None and elapsed >= budget
        status = "PASS" if ok and not over else "FAIL"
        limit = f" (limit {budget:.0f}s)" if budget is not None else ""
        with capsys.disabled():
            print(f"\n[criterion {number}] {status} {title}: {elapsed:.1f}s{limit}")
    assert not over, f"criterion {number} took {elapsed:.1f}s, limit {budget}s"


def test_criterion_1_loss_oracles(capsys):
    with criterion(capsys, 1, "supcon vs double loop, focal(gamma=0) vs cross-entropy", 10):
        rng = np.random.default_rng(101)
        for _ in range(200):
            n = int(rng.integers(2, 9))
            y = rng.integers(0, 2, size=n)
            if np.bincount(y, minlength=2).max() < 2:
                y[:2] = y[0]
            z = unit_rows(rng, n, int(rng.integers(2, 9)))
            got = supcon_loss(Tensor(z), y, 0.07).item()
            assert abs(got - supcon_bruteforce(z, y, 0.07)) <= 1e-10 * max(1.0, abs(got))
        for _ in range(200):
            n = int(rng.integers(1, 9))
            logits = rng.normal(scale=3.0, size=n)
            y = rng.integers(0, 2, size=n)
            got = focal_loss(Tensor(logits), y, gamma=0.0, alpha=None).item()
            p = 1.0 / (1.0 + np.exp(-logits))
            ce = float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))
            assert abs(got - ce) <= 1e-12


MICRO = dict(volume_dim=4, backbone_hidden=4, feature_dim=6, projection_hidden=5,
             trajectory_dim=3, class_head=(3, 2))


class ReluPatterns:
    """Wraps ``dk.relu`` to record the on/off pattern of every forward pass.

    A central difference is only meaningful if no ReLU input changes sign inside the
    stencil; otherwise it averages the one-sided slopes of a kink.
    """

    def __init__(self, monkeypatch):
        self._relu, self._buf, self.calls = dk.relu, [], []
        monkeypatch.setattr(dk, "relu", self._record)

    def _record(self, x):
        self._buf.append((x.data > 0).tobytes())
        return self._relu(x)

    def watch(self, build):
        def run():
            self._buf = []
            out = build()
            self.calls.append(tuple(self._buf))
            return out
        self.calls = []
        return run

    def smooth(self):
        return len(set(self.calls)) == 1


def _joint_case(config, attempt, rng):
    direct = bool(config % 2)
    cfg = EncoderConfig(**MICRO, dropout=float(rng.choice([0.0, 0.3])), direct_batch=direct)
    enc = SiameseEncoder(cfg, seed=1000 * attempt + config)
    pre, post = rng.normal(size=(2, 4, 64))
    y = np.array([0, 1, 0, 1])[rng.permutation(4)]
    drop_seed = int(rng.integers(1 << 30))

    def loss():
        saved = (enc.bn.running_mean.copy(), enc.bn.running_var.copy())
        out = _batch_loss(enc, pre, post, y, True, np.random.default_rng(drop_seed),
                          None if direct else 2)[0]
        enc.bn.running_mean, enc.bn.running_var = saved
        return out

    return loss, enc.parameters()


def test_criterion_2_gradient_checks(capsys, monkeypatch):
    with criterion(capsys, 2, "finite-difference checks, every op + joint loss, 50 configs", 60):
        relus = ReluPatterns(monkeypatch)
        worst, resampled = 0.0, 0
        for config in range(50):
            rng = np.random.default_rng(2000 + config)
            for name in sorted(CASES):
                f, params = CASES[name](rng)
                err = check_grad(f, params)
                assert err < 1e-4, (config, name, err)
                worst = max(worst, err)
            for attempt in range(10):
                loss, params = _joint_case(config, attempt, rng)
                err = check_grad(relus.watch(loss), params)
                if relus.smooth():
                    break
                resampled += 1  # stencil straddles a ReLU kink: draw another configuration
            assert relus.smooth(), config
            assert err < 1e-4, (config, "joint", err)
            worst = max(worst, err)
        with capsys.disabled():
            print(f"\n    worst relative error {worst:.2e}; "
                  f"{resampled} joint configs redrawn for straddling a ReLU kink")


def brute_topk(mat, q, k):
    scores = [sum(float(q[j]) * float(mat[i, j]) for j in range(mat.shape[1]))
              for i in range(mat.shape[0])]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:k]
    return order, [scores[i] for i in order]


def test_criterion_3_retrieval_exactness(capsys):
    with criterion(capsys, 3, "archive.search vs brute-force sorted dot products, 1000 cases", 10):
        rng = np.random.default_rng(303)
        for case in range(1000):
            n, d = int(rng.integers(1, 40)), int(rng.integers(1, 9))
            if case % 2:
                # signed basis vectors: exact ties are common
                mat = np.eye(d)[rng.integers(0, d, size=n)] * rng.choice([-1.0, 1.0], (n, 1))
                q = np.eye(d)[rng.integers(0, d)]
            else:
                mat = unit_rows(rng, n, d)
                q = unit_rows(rng, 1, d)[0]
            archive = archive_from_arrays([f"r{i}" for i in range(n)], mat, [0] * n,
                                          [40.0] * n, ["M"] * n)
            k = int(rng.integers(1, n + 3))
            got = search(archive, q, k)
            idx, sims = brute_topk(archive.matrix, q, k)
            assert [x.subject_id for x in got.neighbors] == [f"r{i}" for i in idx]
            assert list(got.similarities) == sims


def _archive(labels):
    n = len(labels)
    return archive_from_arrays([f"a{i}" for i in range(n)], np.eye(8)[:n], labels, [40.0] * n,
                               ["F"] * n)


class Always:
    thread_safe = True

    def __init__(self, text):
        self.text = text

    def __call__(self, prompt):
        return self.text


def test_criterion_4a_fusion_traces(capsys):
    with criterion(capsys, "4a", "end-to-end predict traces 0.08 / 0.92 / 0.32"):
        cfg, q = OracleConfig(), np.eye(8)[0]
        traces = [
            (_archive([0] * 5), RuleBasedProvider(), 0.0, 0.2, 0.08, 0),
            (_archive([1] * 5), RuleBasedProvider(), 1.0, 0.8, 0.92, 1),
            (_archive([0] * 5), Always("Unclear from these cases."), 0.0, 0.8, 0.32, 0),
        ]
        for archive, provider, pn, pl, want, label in traces:
            v = predict("q", 40.0, "M", q, archive, provider, cfg)
            assert v.p_neighbor == pn and v.p_llm == pl
            # the fused value is exactly w*p_nb + (1-w)*p_llm in binary64
            assert v.p_q == 0.6 * pn + (1 - 0.6) * pl
            assert round(v.p_q, 12) == want and v.label == label
        assert v.token == UNPARSEABLE


# ---- full cross-validation runs, shared between criteria 4b, 7 and 8 ----

@pytest.fixture(scope="module")
def cv_runs():
    t0 = time.perf_counter()
    config = EvalConfig()
    high = generate_cohort(CohortSpec(class_separation=4.0))
    plan = plan_for_cohort(high, config.n_folds, config.seed)
    cache = EmbeddingCache(high, plan, config)
    high_report = run_cv(high, ["M4", "M5", "random-encoder"], config, plan=plan, cache=cache)
    null = generate_cohort(CohortSpec(class_separation=0.0))
    null_report = run_cv(null, ["M4", "M5"], config)
    elapsed = time.perf_counter() - t0
    return dict(config=config, cohort=high, cache=cache, high=high_report, null=null_report,
                elapsed=elapsed)


@pytest.mark.slow
def test_criterion_7_separability(capsys, cv_runs):
    with criterion(capsys, 7, "separability signal on synthetic cohorts (n=268)"):
        auc = lambda rep, m: rep["methods"][m]["aggregate"]["auc"]
        high, null = cv_runs["high"], cv_runs["null"]
        summary = (f"high: M4 {auc(high, 'M4'):.3f} M5 {auc(high, 'M5'):.3f} "
                   f"random {auc(high, 'random-encoder'):.3f}; "
                   f"null: M4 {auc(null, 'M4'):.3f} M5 {auc(null, 'M5'):.3f}; "
                   f"CV time {cv_runs['elapsed']:.0f}s")
        with capsys.disabled():
            print(f"\n    {summary}")
        assert high["cohort"] == {"n_subjects": 268, "n_positive": 53}
        assert auc(high, "M4") >= 0.90 and auc(high, "M5") >= 0.90
        assert 0.40 <= auc(high, "random-encoder") <= 0.60
        assert 0.40 <= auc(null, "M4") <= 0.60 and 0.40 <= auc(null, "M5") <= 0.60
        assert cv_runs["elapsed"] < 15 * 60


@pytest.mark.slow
def test_criterion_4b_unit_weight_is_neighbor_majority(capsys, cv_runs):
    with criterion(capsys, "4b", "w_n=1 M5 equals neighbour majority over a full CV run"):
        cohort, cache = cv_runs["cohort"], cv_runs["cache"]
        config = cv_runs["config"]
        config1 = replace(config, oracle=replace(config.oracle, neighbor_weight=1.0))
        preds = method_predictions(cohort, cache, "M5", config1)
        assert len(preds) == len(cohort)
        for p in preds:
            labels = p.extra["neighbor_labels"]
            majority = int(sum(labels) / len(labels) > 0.5)
            assert int(p.score > config.oracle.threshold) == majority, p.subject_id
            assert p.score == sum(labels) / len(labels)


@pytest.mark.slow
def test_criterion_8_audit(capsys, cv_runs):
    with criterion(capsys, 8, "rule-based audit: 0% hallucination, 100% adherence"):
        res = cv_runs["high"]["methods"]["M5"]
        assert len(res["predictions"]) == 268
        assert res["audit"] == {"hallucination_rate": 0.0, "adherence_rate": 1.0}
        assert all(p["hallucination"] is False and p["adherent"] is True
                   for p in res["predictions"])


def test_criterion_5_metric_oracles(capsys):
    with criterion(capsys, 5, "AUC vs pair counting, balanced-accuracy identity, 0.744"):
        rng = np.random.default_rng(505)
        for n in range(2, 51):
            for _ in range(20):
                y = rng.integers(0, 2, size=n)
                y[:2] = [0, 1]
                s = rng.integers(0, 5, size=n) / 4.0 if n % 2 else rng.random(n)
                pos, neg = s[y == 1], s[y == 0]
                want = sum(1.0 if a > b else 0.5 if a == b else 0.0
                           for a, b in itertools.product(pos, neg)) / (pos.size * neg.size)
                assert auc_roc(s, y) == want
                for t in threshold_grid():
                    ms = classification_metrics(s, y, t)
                    assert ms.balanced_accuracy == (ms.sensitivity + ms.specificity) / 2
        assert round((0.566 + 0.921) / 2, 3) == 0.744


def test_criterion_6_protocol(capsys):
    with criterion(capsys, 6, "5-fold plan on 215/53, leakage sentinel, 11-point grid"):
        cohort = generate_cohort(CohortSpec(n_subjects=268, positive_fraction=53 / 268,
                                            volume_dim=4))
        assert sum(r.label for r in cohort) == 53
        plan = plan_for_cohort(cohort, 5, 42)
        labels = {r.subject_id: r.label for r in cohort}
        assert sorted(len(t) for t in plan.test_ids) == [53, 53, 54, 54, 54]
        assert all(sum(labels[s] for s in t) in (10, 11) for t in plan.test_ids)
        # a held-out subject planted in one training fold must abort the run
        leak = plan.test_ids[3][0]
        bad = FoldPlan(5, 42, plan.test_ids,
                       tuple(t + (leak,) if f == 3 else t for f, t in enumerate(plan.train_ids)))
        with pytest.raises(LeakageError, match=leak):
            run_cv(cohort, ["M4"], EvalConfig(), plan=bad)
        grid = threshold_grid(0.30, 0.50, 0.02)
        assert grid == [(30 + 2 * i) / 100 for i in range(11)]
        assert stratified_kfold([r.subject_id for r in cohort], [r.label for r in cohort],
                                5, 42) == plan


@pytest.mark.slow
def test_criterion_9_evaluate_determinism(capsys, tmp_path, monkeypatch):
    with criterion(capsys, 9, "evaluate twice (--threads 1, 2): byte-identical reports"):
        monkeypatch.chdir(tmp_path)
        write_cohort("cohort.jsonl", generate_cohort(CohortSpec(class_separation=4.0)))
        for out, threads in (("a.json", "1"), ("b.json", "2")):
            with capsys.disabled():
                code = main(["evaluate", "--cohort", "cohort.jsonl", "--method", "M5",
                             "--method", "M4", "--out", out, "--threads", threads])
            assert code == 0
        a, b = (tmp_path / "a.json").read_bytes(), (tmp_path / "b.json").read_bytes()
        assert a == b
        assert json.loads(a)["schema"] == "trajoracle-report"
