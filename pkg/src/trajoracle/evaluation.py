"""Leakage-free stratified cross-validation, metrics, threshold search and report emission."""
from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .archive import PopulationArchive, archive_from_arrays
from .classifiers import (KNNClassifier, LogisticRegression, MLPClassifier, SoftVoteEnsemble)
from .encoder import EncoderConfig, SiameseEncoder, train_encoder
from .errors import ConfigError, LeakageError
from .oracle import (OracleConfig, RuleBasedProvider, audit_justification, build_prompt,
                     fuse, predict_from_result)
from .synthdata import SubjectRecord

REPORT_SCHEMA = "trajoracle-report"
REPORT_VERSION = 1

METHODS = ("M3", "M3b", "M4", "M5", "M6-style", "random-encoder", "k1-retrieval",
           "no-age-filter")
ORACLE_METHODS = ("M5", "random-encoder", "k1-retrieval", "no-age-filter")


# ---------------------------------------------------------------- folds

@dataclass(frozen=True)
class FoldPlan:
    n_folds: int
    seed: int
    test_ids: tuple[tuple[str, ...], ...]
    train_ids: tuple[tuple[str, ...], ...]

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "seed": self.seed,
                "test_ids": [list(t) for t in self.test_ids]}


def stratified_kfold(ids: Sequence[str], labels, n_folds: int = 5, seed: int = 42) -> FoldPlan:
    """Per-class shuffles dealt round-robin, the fold pointer carrying over between classes."""
    labels = np.asarray(labels)
    ids = list(ids)
    if len(ids) != labels.size:
        raise ConfigError("ids and labels differ in length")
    if len(set(ids)) != len(ids):
        raise ConfigError("subject ids must be unique")
    if n_folds < 2:
        raise ConfigError("n_folds: must be >= 2")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    pointer = 0
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        if idx.size < n_folds:
            raise ConfigError(f"class {c} has {idx.size} members, fewer than {n_folds} folds")
        for i in idx[rng.permutation(idx.size)]:
            folds[pointer].append(int(i))
            pointer = (pointer + 1) % n_folds
    test = []
    train = []
    for f in range(n_folds):
        members = set(folds[f])
        test.append(tuple(ids[i] for i in sorted(members)))
        train.append(tuple(ids[i] for i in range(len(ids)) if i not in members))
    return FoldPlan(n_folds, seed, tuple(test), tuple(train))


def plan_for_cohort(cohort: Sequence[SubjectRecord], n_folds=5, seed=42) -> FoldPlan:
    return stratified_kfold([r.subject_id for r in cohort], [r.label for r in cohort],
                            n_folds, seed)


def check_fold(train_ids, test_ids, where="training fold"):
    test = set(test_ids)
    for sid in train_ids:
        if sid in test:
            raise LeakageError(sid, where)


# ---------------------------------------------------------------- metrics

def auc_roc(scores, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0 or labels.min() == labels.max():
        raise ConfigError("AUC needs both classes present")
    return float(kernels.mann_whitney_auc(scores, labels))


@dataclass(frozen=True)
class MetricSet:
    auc: float | None
    f1: float
    sensitivity: float
    specificity: float
    balanced_accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ratio(a, b) -> float:
    return a / b if b else 0.0


def classification_metrics(scores, labels, threshold: float = 0.5) -> MetricSet:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pred = scores > threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    sens = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    both = 0 < pos.sum() < pos.size
    return MetricSet(
        auc=auc_roc(scores, labels) if both else None,
        f1=_ratio(2 * tp, 2 * tp + fp + fn),
        sensitivity=sens,
        specificity=spec,
        balanced_accuracy=(sens + spec) / 2,
        tp=tp, fp=fp, tn=tn, fn=fn, threshold=float(threshold),
    )


def threshold_grid(lo: float = 0.30, hi: float = 0.50, step: float = 0.02) -> list[float]:
    n = int(round((hi - lo) / step)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def threshold_sweep(scores, labels, lo=0.30, hi=0.50, step=0.02) -> tuple[list[MetricSet], float]:
    """Metrics at each grid threshold; the best balanced accuracy wins, ties to the largest."""
    rows = [classification_metrics(scores, labels, t) for t in threshold_grid(lo, hi, step)]
    best = rows[0]
    for r in rows[1:]:
        if r.balanced_accuracy >= best.balanced_accuracy:
            best = r
    return rows, best.threshold


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """(FPR, TPR) pairs at every distinct score threshold, from (0, 0) to (1, 1)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = labels.size - n_pos
    pts = [(0.0, 0.0)]
    for t in np.unique(scores)[::-1]:
        pred = scores >= t
        pts.append((_ratio(int(np.sum(pred & (labels == 0))), n_neg),
                    _ratio(int(np.sum(pred & (labels == 1))), n_pos)))
    return pts


@dataclass(frozen=True)
class RetrievalQuality:
    top_k_fidelity: float
    mean_cosine: float
    calibration_mae: float


def retrieval_quality(query_labels, neighbor_labels, neighbor_sims, p_q) -> RetrievalQuality:
    """Inputs are per query: its label, its neighbours' labels and similarities, its p_q."""
    n = len(query_labels)
    if n == 0:
        return RetrievalQuality(0.0, 0.0, 0.0)
    hits = sum(1 for y, nl in zip(query_labels, neighbor_labels) if y in list(nl))
    sims = [float(s) for row in neighbor_sims for s in row]
    mae = math.fsum(abs(p - y) for p, y in zip(p_q, query_labels)) / n
    return RetrievalQuality(hits / n, math.fsum(sims) / len(sims) if sims else 0.0, mae)


# ---------------------------------------------------------------- configuration

@dataclass
class EvalConfig:
    n_folds: int = 5
    seed: int = 42
    threads: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    mlp_seed: int = 0
    threshold_range: tuple[float, float, float] = (0.30, 0.50, 0.02)

    def to_dict(self) -> dict:
        return {
            "n_folds": self.n_folds,
            "seed": self.seed,
            "encoder": self.encoder.to_dict(),
            "oracle": self.oracle.to_dict(),
            "mlp_seed": self.mlp_seed,
            "threshold_range": list(self.threshold_range),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown evaluation config keys: {sorted(unknown)}")
        if "encoder" in data:
            data["encoder"] = EncoderConfig.from_dict(data["encoder"])
        if "oracle" in data:
            data["oracle"] = OracleConfig.from_dict(data["oracle"])
        if "threshold_range" in data:
            data["threshold_range"] = tuple(float(v) for v in data["threshold_range"])
        return cls(**data)


# ---------------------------------------------------------------- per-fold work

@dataclass
class FoldEmbedding:
    fold: int
    train_idx: np.ndarray
    test_idx: np.ndarray
    train_vectors: np.ndarray
    test_vectors: np.ndarray
    training: dict | None


def _fold_encoder_config(config: EvalConfig, fold: int) -> EncoderConfig:
    return replace(config.encoder, seed=config.encoder.seed + fold)


def _embed_fold(cohort, plan: FoldPlan, fold: int, config: EvalConfig, trained: bool,
                log_dir=None) -> FoldEmbedding:
    check_fold(plan.train_ids[fold], plan.test_ids[fold])
    pos = {r.subject_id: i for i, r in enumerate(cohort)}
    train_idx = np.array([pos[s] for s in plan.train_ids[fold]], dtype=int)
    test_idx = np.array([pos[s] for s in plan.test_ids[fold]], dtype=int)
    train_recs = [cohort[i] for i in train_idx]
    test_recs = [cohort[i] for i in test_idx]
    cfg = _fold_encoder_config(config, fold)
    summary = None
    if trained:
        log_path = Path(log_dir) / f"fold{fold}.jsonl" if log_dir else None
        res = train_encoder(train_recs, cfg, held_out_ids=plan.test_ids[fold], log_path=log_path)
        enc = res.encoder
        summary = {"best_epoch": res.best_epoch, "epochs": len(res.history)}
        if res.history:
            summary["final_train_loss"] = res.history[-1]["train_loss"]
            summary["best_val_loss"] = min(h["val_loss"] for h in res.history)
    else:
        enc = SiameseEncoder(cfg)
    return FoldEmbedding(fold, train_idx, test_idx, enc.embed_records(train_recs),
                         enc.embed_records(test_recs), summary)


class EmbeddingCache:
    """Fold embeddings keyed by (trained, fold); each is computed at most once."""

    def __init__(self, cohort, plan: FoldPlan, config: EvalConfig, log_dir=None):
        self.cohort, self.plan, self.config, self.log_dir = cohort, plan, config, log_dir
        self._store: dict[tuple[bool, int], FoldEmbedding] = {}

    def get(self, trained: bool) -> list[FoldEmbedding]:
        missing = [f for f in range(self.plan.n_folds) if (trained, f) not in self._store]
        if missing:
            work = lambda f: _embed_fold(self.cohort, self.plan, f, self.config, trained,
                                         self.log_dir)
            if self.config.threads > 1 and len(missing) > 1:
                with ThreadPoolExecutor(max_workers=self.config.threads) as pool:
                    results = list(pool.map(work, missing))
            else:
                results = [work(f) for f in missing]
            for f, r in zip(missing, results):
                self._store[(trained, f)] = r
        return [self._store[(trained, f)] for f in range(self.plan.n_folds)]


def _fold_archive(cohort, fe: FoldEmbedding, plan: FoldPlan) -> PopulationArchive:
    recs = [cohort[i] for i in fe.train_idx]
    archive = archive_from_arrays([r.subject_id for r in recs], fe.train_vectors,
                                  [r.label for r in recs], [r.age for r in recs],
                                  [r.sex for r in recs])
    held = set(plan.test_ids[fe.fold])
    for sid in archive.ids:
        if sid in held:
            raise LeakageError(sid, f"fold {fe.fold} archive")
    return archive


@dataclass
class Prediction:
    subject_id: str
    fold: int
    label: int
    score: float
    extra: dict = field(default_factory=dict)


def _oracle_fold(cohort, fe: FoldEmbedding, plan, oracle_cfg: OracleConfig, provider,
                 audit: bool) -> list[Prediction]:
    archive = _fold_archive(cohort, fe, plan)
    results = archive.search_batch(fe.test_vectors, oracle_cfg.k)
    out = []
    for j, i in enumerate(fe.test_idx):
        r = cohort[i]
        prompt = build_prompt(r.age, r.sex, results[j], oracle_cfg)
        v = predict_from_result(r.subject_id, r.age, r.sex, results[j], provider, oracle_cfg,
                                prompt=prompt)
        extra = {
            "token": v.token,
            "p_neighbor": v.p_neighbor,
            "p_llm": v.p_llm,
            "neighbor_ids": list(v.neighbor_ids),
            "neighbor_labels": results[j].labels,
            "similarities": list(v.similarities),
        }
        if audit:
            flags = audit_justification(v, prompt)
            extra["hallucination"] = flags.hallucination
            extra["adherent"] = flags.adherent
        out.append(Prediction(r.subject_id, fe.fold, r.label, v.p_q, extra))
    return out


def _classifier_for(method: str, config: EvalConfig):
    if method == "M3":
        return LogisticRegression()
    if method == "M3b":
        return MLPClassifier(seed=config.mlp_seed)
    if method == "M4":
        return KNNClassifier(k_max=config.oracle.k)
    if method == "M6-style":
        return SoftVoteEnsemble([KNNClassifier(k_max=config.oracle.k), LogisticRegression(),
                                 MLPClassifier(seed=99), MLPClassifier(seed=123)])
    raise ConfigError(f"unknown method {method!r}")


def _classifier_fold(cohort, fe: FoldEmbedding, plan, method, config) -> list[Prediction]:
    _fold_archive(cohort, fe, plan)  # leakage sentinel on the same training set
    y = np.array([cohort[i].label for i in fe.train_idx])
    model = _classifier_for(method, config).fit(fe.train_vectors, y)
    probs = model.predict_proba(fe.test_vectors)
    return [Prediction(cohort[i].subject_id, fe.fold, cohort[i].label, float(p))
            for i, p in zip(fe.test_idx, probs)]


def _oracle_config_for(method: str, base: OracleConfig) -> OracleConfig:
    if method == "k1-retrieval":
        return replace(base, k=1)
    if method == "no-age-filter":
        return replace(base, age_gap=math.inf)
    return base


def method_predictions(cohort, cache: EmbeddingCache, method: str, config: EvalConfig,
                       provider=None) -> list[Prediction]:
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    folds = cache.get(trained=(method != "random-encoder"))
    provider = provider or RuleBasedProvider()
    if method in ORACLE_METHODS:
        ocfg = _oracle_config_for(method, config.oracle)
        work = lambda fe: _oracle_fold(cohort, fe, cache.plan, ocfg, provider, True)
    else:
        work = lambda fe: _classifier_fold(cohort, fe, cache.plan, method, config)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            per_fold = list(pool.map(work, folds))
    else:
        per_fold = [work(fe) for fe in folds]
    return [p for fold in per_fold for p in fold]


def summarize(preds: Sequence[Prediction], config: EvalConfig, n_subjects: int,
              n_folds: int) -> dict:
    ids = [p.subject_id for p in preds]
    if len(ids) != n_subjects or len(set(ids)) != n_subjects:
        raise ConfigError("aggregate predictions must cover every subject exactly once")
    scores = np.array([p.score for p in preds])
    labels = np.array([p.label for p in preds])
    lo, hi, step = config.threshold_range
    sweep, best_t = threshold_sweep(scores, labels, lo, hi, step)
    thr = config.oracle.threshold
    out = {
        "aggregate": classification_metrics(scores, labels, thr).to_dict(),
        "aggregate_optimized": classification_metrics(scores, labels, best_t).to_dict(),
        "per_fold": [],
        "threshold_sweep": [r.to_dict() for r in sweep],
        "best_threshold": best_t,
        "roc": [list(p) for p in roc_points(scores, labels)],
    }
    folds = np.array([p.fold for p in preds])
    for f in range(n_folds):
        m = folds == f
        out["per_fold"].append(classification_metrics(scores[m], labels[m], thr).to_dict())
    if preds and "p_neighbor" in preds[0].extra:
        rq = retrieval_quality(labels.tolist(), [p.extra["neighbor_labels"] for p in preds],
                               [p.extra["similarities"] for p in preds], scores.tolist())
        out["retrieval"] = asdict(rq)
        if "hallucination" in preds[0].extra:
            n = len(preds)
            out["audit"] = {
                "hallucination_rate": sum(p.extra["hallucination"] for p in preds) / n,
                "adherence_rate": sum(p.extra["adherent"] for p in preds) / n,
            }
    out["predictions"] = [
        {"subject_id": p.subject_id, "fold": p.fold, "label": p.label, "score": p.score,
         **{k: v for k, v in p.extra.items() if k not in ("neighbor_labels",)}}
        for p in sorted(preds, key=lambda p: p.subject_id)
    ]
    return out


def run_cv(cohort: Sequence[SubjectRecord], methods: Sequence[str] | str,
           config: EvalConfig | None = None, plan: FoldPlan | None = None,
           provider=None, cache: EmbeddingCache | None = None, log_dir=None) -> dict:
    """Cross-validated report for one or more methods; fold embeddings are shared."""
    config = config or EvalConfig()
    if isinstance(methods, str):
        methods = [methods]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    if plan is None:
        plan = plan_for_cohort(cohort, config.n_folds, config.seed)
    for f in range(plan.n_folds):
        check_fold(plan.train_ids[f], plan.test_ids[f])
    if cache is None:
        cache = EmbeddingCache(cohort, plan, config, log_dir)
    report = {
        "schema": REPORT_SCHEMA,
        "schema_version": REPORT_VERSION,
        "config": config.to_dict(),
        "cohort": {"n_subjects": len(cohort),
                   "n_positive": int(sum(r.label for r in cohort))},
        "plan": plan.to_dict(),
        "methods": {},
    }
    for m in methods:
        preds = method_predictions(cohort, cache, m, config, provider)
        report["methods"][m] = summarize(preds, config, len(cohort), plan.n_folds)
    training = [cache._store[(True, f)].training for f in range(plan.n_folds)
                if (True, f) in cache._store]
    if training:
        report["training"] = training
    return report


def weight_sweep(cohort, config: EvalConfig | None = None, grid: Sequence[float] | None = None,
                 cache: EmbeddingCache | None = None, provider=None) -> list[dict]:
    """Calibration MAE of the fused probability per neighbour weight, reusing one retrieval pass."""
    config = config or EvalConfig()
    grid = list(grid) if grid is not None else [round(0.1 * i, 10) for i in range(11)]
    if cache is None:
        cache = EmbeddingCache(cohort, plan_for_cohort(cohort, config.n_folds, config.seed),
                               config)
    preds = method_predictions(cohort, cache, "M5", config, provider)
    rows = []
    for w in grid:
        ocfg = replace(config.oracle, neighbor_weight=float(w)).validate()
        p_q = [fuse(p.extra["p_neighbor"], p.extra["p_llm"], ocfg)[0] for p in preds]
        mae = math.fsum(abs(q - p.label) for q, p in zip(p_q, preds)) / len(preds)
        rows.append({"neighbor_weight": float(w), "calibration_mae": mae})
    return rows


# ---------------------------------------------------------------- output

def dump_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, sort_keys=True, indent=2, allow_nan=False) + "\n")


def write_roc_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "fpr", "tpr"])
        for name, res in report["methods"].items():
            for fpr, tpr in res["roc"]:
                w.writerow([name, repr(fpr), repr(tpr)])


def write_threshold_csv(report: dict, path) -> None:
    cols = ["threshold", "balanced_accuracy", "sensitivity", "specificity", "f1"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *cols])
        for name, res in report["methods"].items():
            for row in res["threshold_sweep"]:
                w.writerow([name, *[repr(row[c]) for c in cols]])


def write_ablation_csv(report: dict, path) -> None:
    cols = ["auc", "balanced_accuracy", "sensitivity", "specificity", "f1"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", *cols])
        for name, res in report["methods"].items():
            w.writerow([name, *[repr(res["aggregate"][c]) for c in cols]])
