import json

import pytest

from trajoracle.cli import main
from trajoracle.synthdata import read_cohort

TINY = {"encoder": {"volume_dim": 8, "backbone_hidden": 16, "feature_dim": 32,
                    "projection_hidden": 16, "trajectory_dim": 8, "class_head": [8, 4],
                    "optimizer": {"learning_rate": 1e-3, "cosine_t_max": 2}},
        "epochs": 2}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    return tmp_path


@pytest.fixture
def small(workdir):
    assert main(["gen-data", "--n", "50", "--pos-frac", "0.3", "--dim", "8",
                 "--out", "c.jsonl"]) == 0
    (workdir / "cfg.json").write_text(json.dumps(TINY))
    return workdir


def test_gen_data_reference_counts(workdir):
    assert main(["gen-data", "--n", "268", "--pos-frac", "0.1978", "--seed", "42",
                 "--out", "cohort.jsonl"]) == 0
    labels = [r.label for r in read_cohort("cohort.jsonl")]
    assert labels.count(0) == 215 and labels.count(1) == 53


def test_evaluate_twice_byte_identical(small):
    for out, threads in (("r1.json", "1"), ("r2.json", "2")):
        assert main(["evaluate", "--method", "M5", "--cohort", "c.jsonl", "--out", out,
                     "--config", "cfg.json", "--threads", threads]) == 0
    assert (small / "r1.json").read_bytes() == (small / "r2.json").read_bytes()
    rep = json.loads((small / "r1.json").read_text())
    assert rep["config"]["encoder"]["epochs"] == 2 and rep["config"]["seed"] == 42


def test_phase_commands_and_retrieve(small, capsys):
    assert main(["train", "--cohort", "c.jsonl", "--out", "e.npz", "--config", "cfg.json",
                 "--exclude-fold", "0", "--log", "train.jsonl"]) == 0
    assert main(["embed", "--cohort", "c.jsonl", "--checkpoint", "e.npz",
                 "--out", "emb.npz"]) == 0
    assert main(["build-archive", "--embeddings", "emb.npz", "--out", "a.bin"]) == 0
    capsys.readouterr()
    assert main(["retrieve", "--archive", "a.bin", "--query-id", "s042", "--k", "5"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5 and lines[0].split("\t")[1] == "s042"
    sims = [float(l.split("\t")[2]) for l in lines]
    assert sims == sorted(sims, reverse=True)
    # matches the library search
    from trajoracle.archive import load_archive, search
    a = load_archive("a.bin")
    want = search(a, a.entry(a.ids.index("s042")).trajectory, 5)
    assert [l.split("\t")[1] for l in lines] == [n.subject_id for n in want.neighbors]
    assert main(["predict", "--archive", "a.bin", "--query-id", "s042", "--log", "v.jsonl",
                 "--out", "v.json"]) == 0
    verdict = json.loads((small / "v.json").read_text())
    assert verdict["p_q"] == pytest.approx(0.6 * verdict["p_neighbor"] + 0.4 * verdict["p_llm"])


def test_commands_do_not_mutate_inputs(small):
    before = (small / "c.jsonl").read_bytes()
    assert main(["audit", "--cohort", "c.jsonl", "--config", "cfg.json", "--out",
                 "audit.json"]) == 0
    assert (small / "c.jsonl").read_bytes() == before
    audit = json.loads((small / "audit.json").read_text())
    assert audit["hallucination_rate"] == 0.0 and audit["adherence_rate"] == 1.0


def test_weight_sweep_and_ablate(small):
    assert main(["weight-sweep", "--cohort", "c.jsonl", "--config", "cfg.json",
                 "--out", "w.json"]) == 0
    assert len(json.loads((small / "w.json").read_text())["rows"]) == 11
    assert main(["ablate", "--cohort", "c.jsonl", "--config", "cfg.json", "--out", "ab.json",
                 "--ablation-csv", "ab.csv"]) == 0
    assert (small / "ab.csv").read_text().count("\n") == 5


def test_usage_errors_exit_2(small, capsys):
    with pytest.raises(SystemExit) as e:
        main(["evaluate", "--cohort", "c.jsonl"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["evaluate", "--cohort", "c.jsonl", "--out", "x.json", "--method", "M9"])
    assert e.value.code == 2
    (small / "bad.json").write_text(json.dumps({"mystery": 1}))
    with pytest.raises(SystemExit) as e:
        main(["evaluate", "--cohort", "c.jsonl", "--out", "x.json", "--config", "bad.json"])
    assert e.value.code == 2


def test_data_errors_exit_1(small, capsys):
    (small / "broken.jsonl").write_text('{"format": "trajoracle-cohort", "version": 1, '
                                        '"n_records": 3}\n{"subject_id": ')
    assert main(["evaluate", "--cohort", "broken.jsonl", "--out", "x.json"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ParseError:") and err.count("\n") == 1
    assert main(["retrieve", "--archive", "missing.bin", "--query-id", "s1"]) == 1
    assert main(["gen-data", "--n", "3", "--pos-frac", "0.01", "--out", "z.jsonl"]) == 1
    assert "positive_fraction" in capsys.readouterr().err
