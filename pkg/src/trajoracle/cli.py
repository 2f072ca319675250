"""Command-line entry point: one subcommand per pipeline phase."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .archive import archive_from_arrays, load_archive, save_archive, search
from .encoder import EncoderConfig, SiameseEncoder, TrajectoryVector, train_encoder
from .errors import ConfigError, ParseError, TrajOracleError
from .evaluation import (METHODS, EvalConfig, dump_report, plan_for_cohort, run_cv,
                         weight_sweep, write_ablation_csv, write_roc_csv, write_threshold_csv)
from .oracle import (EndpointConfig, HTTPProvider, OracleConfig, RuleBasedProvider,
                     predict_from_result, write_verdict_log)
from .synthdata import CohortSpec, generate_cohort, read_cohort, write_cohort

ABLATION_METHODS = ["M5", "random-encoder", "k1-retrieval", "no-age-filter"]


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers

def _eval_config(args) -> EvalConfig:
    enc = EncoderConfig.from_dict({"seed": args.seed, **(args.encoder or {})})
    if args.epochs is not None:
        enc = replace(enc, epochs=args.epochs,
                      optimizer=replace(enc.optimizer, cosine_t_max=max(args.epochs, 1)))
    oracle = OracleConfig.from_dict(args.oracle or {})
    for flag, key in (("k", "k"), ("age_gap", "age_gap"), ("neighbor_weight", "neighbor_weight")):
        value = getattr(args, flag, None)
        if value is not None:
            oracle = replace(oracle, **{key: value})
    oracle.validate()
    return EvalConfig(n_folds=args.folds, seed=args.seed, threads=args.threads,
                      encoder=enc, oracle=oracle)


def _provider(args):
    if getattr(args, "provider", "rule") == "http":
        endpoint = EndpointConfig.from_env()
        if endpoint is None:
            raise ConfigError("http provider needs TRAJORACLE_VERDICT_URL to be set")
        return HTTPProvider(endpoint)
    return RuleBasedProvider()


def _load_embeddings(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k] for k in ("ids", "vectors", "labels", "ages", "sexes")}
    except (OSError, KeyError, ValueError) as exc:
        raise ParseError(f"{path}: unreadable embeddings file ({exc})") from exc


def _emit(obj, out):
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    spec = CohortSpec(n_subjects=args.n, positive_fraction=args.pos_frac,
                      volume_dim=args.dim, class_separation=args.separation,
                      seed=args.seed, nuisance_scale=args.nuisance)
    spec.validate()
    records = generate_cohort(spec)
    write_cohort(args.out, records, spec)
    n_pos = sum(r.label for r in records)
    print(f"wrote {len(records)} subjects ({len(records) - n_pos} label 0, {n_pos} label 1) "
          f"to {args.out}")


def cmd_train(args):
    cohort = read_cohort(args.cohort)
    cfg = _eval_config(args)
    held = ()
    if args.exclude_fold is not None:
        plan = plan_for_cohort(cohort, cfg.n_folds, cfg.seed)
        if not 0 <= args.exclude_fold < plan.n_folds:
            raise ConfigError(f"--exclude-fold must be in [0, {plan.n_folds - 1}]")
        held = plan.test_ids[args.exclude_fold]
        cohort = [r for r in cohort if r.subject_id not in set(held)]
    res = train_encoder(cohort, cfg.encoder, held_out_ids=held, log_path=args.log)
    res.encoder.save(args.out)
    print(f"trained on {len(cohort)} subjects; best epoch {res.best_epoch}; saved {args.out}")


def cmd_embed(args):
    cohort = read_cohort(args.cohort)
    enc = SiameseEncoder.load(args.checkpoint)
    vectors = enc.embed_records(cohort)
    with open(args.out, "wb") as fh:
        np.savez(fh, ids=np.array([r.subject_id for r in cohort]), vectors=vectors,
                 labels=np.array([r.label for r in cohort]),
                 ages=np.array([r.age for r in cohort]),
                 sexes=np.array([r.sex for r in cohort]))
    print(f"embedded {len(cohort)} subjects into {args.out}")


def cmd_build_archive(args):
    emb = _load_embeddings(args.embeddings)
    keep = np.ones(len(emb["ids"]), dtype=bool)
    if args.exclude:
        excluded = set(Path(args.exclude).read_text().split())
        keep = np.array([str(i) not in excluded for i in emb["ids"]])
    archive = archive_from_arrays(*(emb[k][keep] for k in ("ids", "vectors", "labels", "ages",
                                                           "sexes")))
    save_archive(archive, args.out)
    print(f"archive of {archive.size} entries written to {args.out}")


def _query_vector(args, archive):
    if args.embeddings:
        emb = _load_embeddings(args.embeddings)
        ids = [str(i) for i in emb["ids"]]
        if args.query_id not in ids:
            raise ConfigError(f"query id {args.query_id!r} not in {args.embeddings}")
        i = ids.index(args.query_id)
        return (TrajectoryVector(emb["vectors"][i], args.query_id), float(emb["ages"][i]),
                str(emb["sexes"][i]))
    if args.query_id not in archive:
        raise ConfigError(f"query id {args.query_id!r} not in archive; pass --embeddings")
    e = archive.entry(archive.ids.index(args.query_id))
    return e.trajectory, e.age, e.sex


def cmd_retrieve(args):
    archive = load_archive(args.archive)
    query, _, _ = _query_vector(args, archive)
    res = search(archive, query, args.k)
    for rank, n in enumerate(res.neighbors, 1):
        print(f"{rank}\t{n.subject_id}\t{n.similarity!r}\t{n.label}\t{n.age}\t{n.sex}")


def cmd_predict(args):
    archive = load_archive(args.archive)
    cfg = _eval_config(args).oracle
    query, age, sex = _query_vector(args, archive)
    res = search(archive, query, cfg.k)
    verdict = predict_from_result(args.query_id, age, sex, res, _provider(args), cfg)
    if args.log:
        write_verdict_log(args.log, [verdict])
    _emit(verdict.to_dict(), args.out)


def _write_tables(report, args):
    if getattr(args, "roc_csv", None):
        write_roc_csv(report, args.roc_csv)
    if getattr(args, "threshold_csv", None):
        write_threshold_csv(report, args.threshold_csv)
    if getattr(args, "ablation_csv", None):
        write_ablation_csv(report, args.ablation_csv)


def _methods(values):
    out = []
    for v in values:
        out.extend(m for m in v.split(",") if m)
    for m in out:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    return out


def cmd_evaluate(args):
    cohort = read_cohort(args.cohort)
    methods = _methods(args.method or ["M5"])
    report = run_cv(cohort, methods, _eval_config(args), provider=_provider(args),
                    log_dir=args.log_dir)
    dump_report(report, args.out)
    _write_tables(report, args)
    for m in methods:
        agg = report["methods"][m]["aggregate"]
        print(f"{m}\tauc={agg['auc']:.4f}\tbalanced_accuracy={agg['balanced_accuracy']:.4f}")


def cmd_ablate(args):
    cohort = read_cohort(args.cohort)
    report = run_cv(cohort, ABLATION_METHODS, _eval_config(args), provider=_provider(args))
    dump_report(report, args.out)
    _write_tables(report, args)
    for m in ABLATION_METHODS:
        agg = report["methods"][m]["aggregate"]
        print(f"{m}\tauc={agg['auc']:.4f}\tbalanced_accuracy={agg['balanced_accuracy']:.4f}")


def cmd_weight_sweep(args):
    cohort = read_cohort(args.cohort)
    cfg = _eval_config(args)
    grid = None
    if args.grid:
        grid = [float(g) for g in args.grid.split(",")]
    rows = weight_sweep(cohort, cfg, grid, provider=_provider(args))
    _emit({"config": cfg.to_dict(), "rows": rows}, args.out)


def cmd_audit(args):
    cohort = read_cohort(args.cohort)
    cfg = _eval_config(args)
    report = run_cv(cohort, ["M5"], cfg, provider=_provider(args))
    res = report["methods"]["M5"]
    flagged = [p["subject_id"] for p in res["predictions"]
               if p["hallucination"] or not p["adherent"]]
    _emit({"config": cfg.to_dict(), **res["audit"], "n_predictions": len(res["predictions"]),
           "flagged": flagged}, args.out)


# ---------------------------------------------------------------- parser

def _add_eval_flags(p, oracle=True):
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    p.add_argument("--epochs", type=int, default=None, help="encoder epochs (default 50)")
    if oracle:
        p.add_argument("--k", type=int, default=None, help="neighbours retrieved (default 5)")
        p.add_argument("--age-gap", type=float, default=None,
                       help="age filter in years; inf disables (default 15)")
        p.add_argument("--neighbor-weight", type=float, default=None,
                       help="w_n in the fusion (default 0.6)")
        p.add_argument("--provider", choices=("rule", "http"), default="rule",
                       help="verdict provider; http reads TRAJORACLE_VERDICT_URL/_TOKEN")
    p.set_defaults(encoder=None, oracle=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42, help="global seed (default 42)")
    common.add_argument("--threads", type=int, default=1, help="fold-level worker threads")
    common.add_argument("--config", default=None,
                        help="JSON file of flag values (flag names with _); unknown keys rejected")

    parser = argparse.ArgumentParser(prog="trajoracle", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--n", type=int, default=268)
    p.add_argument("--pos-frac", type=float, default=53 / 268)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--nuisance", type=float, default=CohortSpec.nuisance_scale)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train one encoder")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--exclude-fold", type=int, default=None,
                   help="hold out this fold of the seeded stratified plan")
    p.add_argument("--log", default=None, help="JSON-lines training log")
    _add_eval_flags(p, oracle=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="embed a cohort with a checkpoint")
    p.add_argument("--cohort", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="embeddings file (.npz)")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("build-archive", parents=[common], help="build an archive snapshot")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--exclude", default=None, help="file of subject ids to leave out")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_archive)

    for name, func, help_ in (("retrieve", cmd_retrieve, "top-k neighbours of one subject"),
                              ("predict", cmd_predict, "oracle verdict for one subject")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--archive", required=True)
        p.add_argument("--query-id", required=True)
        p.add_argument("--embeddings", default=None, help="where to look up the query vector")
        if name == "retrieve":
            p.add_argument("--k", type=int, default=5)
        else:
            _add_eval_flags(p)
            p.add_argument("--log", default=None, help="append-free JSON-lines verdict log")
            p.add_argument("--out", default=None)
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", parents=[common], help="cross-validated evaluation")
    p.add_argument("--cohort", required=True)
    p.add_argument("--method", action="append", default=None,
                   help=f"one of {', '.join(METHODS)}; repeatable or comma-separated")
    p.add_argument("--out", required=True)
    p.add_argument("--roc-csv", default=None)
    p.add_argument("--threshold-csv", default=None)
    p.add_argument("--ablation-csv", default=None)
    p.add_argument("--log-dir", default=None, help="per-fold training logs")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", parents=[common], help="retrieval and encoder ablations")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablation-csv", default=None)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("weight-sweep", parents=[common], help="calibration MAE across w_n")
    p.add_argument("--cohort", required=True)
    p.add_argument("--grid", default=None, help="comma-separated weights (default 0.0..1.0)")
    p.add_argument("--out", default=None)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_weight_sweep)

    p = sub.add_parser("audit", parents=[common], help="justification audit over a CV run")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", default=None)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_audit)
    return parser


def _apply_config(parser, args, argv):
    """Re-parse with values from --config as defaults so explicit flags still win."""
    try:
        data = json.loads(Path(args.config).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{args.config}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{args.config}: top level must be an object")
    allowed = set(vars(args)) - {"func", "command", "config"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    sub.set_defaults(**data)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            args = _apply_config(parser, args, argv)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except TrajOracleError as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


def _one_line(exc) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
