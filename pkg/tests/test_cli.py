import json

import pytest

from _fixtures import EXPECTED_FUNNEL, build_fixture
from cnnattn.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, file_hash, main
from cnnattn.corpus import read_cohort
from cnnattn.explain import read_sidecar
from cnnattn.synthetic import SyntheticSpec
from cnnattn.trainer import load_folds

TINY = ["--embed-dim", "8", "--n-filters", "4", "--max-len", "300", "--embed-epochs", "1",
        "--max-epochs", "2", "--patience", "1", "--min-doc-freq", "2"]


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "spec.json").write_text(SyntheticSpec(n_subjects=60, seed=7, signal_strength=1.0).to_json())
    assert main(["etl", "--synthetic", str(d / "spec.json"), "--out", str(d / "cohort.jsonl")]) == EXIT_OK
    assert main(["folds", "--cohort", str(d / "cohort.jsonl"), "--out", str(d / "folds.json")]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def trained(work):
    out = work / "run"
    rc = main(["train", "--outcome", "readm30", "--head", "attn", "--cohort", str(work / "cohort.jsonl"),
               "--folds", str(work / "folds.json"), "--out", str(out), *TINY])
    assert rc == EXIT_OK
    return out


def test_etl_writes_cohort_stats_and_manifest(work, capsys):
    recs = read_cohort(work / "cohort.jsonl")
    stats = json.loads((work / "cohort.jsonl.stats.json").read_text())
    assert stats["n_stays"] == len(recs) and stats["schema"].startswith("cnnattn-etl-stats/")
    man = json.loads((work / "cohort.jsonl.manifest.json").read_text())
    assert man["seed"] == 7 and man["outputs"][str(work / "cohort.jsonl")] == file_hash(work / "cohort.jsonl")
    assert man["argv"][0] == "etl"


def test_etl_seed7_hash_is_stable(work, tmp_path):
    assert main(["etl", "--synthetic", str(work / "spec.json"), "--out", str(tmp_path / "c.jsonl")]) == 0
    assert file_hash(tmp_path / "c.jsonl") == file_hash(work / "cohort.jsonl")


def test_etl_fixture_funnel(tmp_path, capsys):
    d = build_fixture(tmp_path / "mimic")
    assert main(["etl", "--mimic-dir", str(d), "--out", str(tmp_path / "c.jsonl")]) == 0
    printed = capsys.readouterr().out
    for step, n in EXPECTED_FUNNEL.items():
        assert f"{step:<16}{n:>8}" in printed
    stats = json.loads((tmp_path / "c.jsonl.stats.json").read_text())
    assert stats["funnel"] == EXPECTED_FUNNEL


def test_etl_schema_error_exit_code(tmp_path):
    d = build_fixture(tmp_path / "mimic")
    (d / "ICUSTAYS.csv").write_text("ROW_ID,SUBJECT_ID\n1,1\n")
    assert main(["etl", "--mimic-dir", str(d), "--out", str(tmp_path / "c.jsonl")]) == EXIT_DATA


def test_refuses_overwrite_without_force(work, capsys):
    args = ["folds", "--cohort", str(work / "cohort.jsonl"), "--out", str(work / "folds.json")]
    assert main(args) == EXIT_USAGE
    assert "--force" in capsys.readouterr().err
    before = (work / "folds.json").read_bytes()
    assert main(args + ["--force"]) == EXIT_OK
    assert (work / "folds.json").read_bytes() == before


def test_embed_excludes_test_subjects_and_is_reproducible(work, tmp_path):
    args = ["embed", "--method", "cbow", "--cohort", str(work / "cohort.jsonl"), "--folds",
            str(work / "folds.json"), "--fold", "1", "--embed-dim", "8", "--embed-epochs", "1"]
    assert main(args + ["--out", str(tmp_path / "a.emb")]) == 0
    assert main(args + ["--out", str(tmp_path / "b.emb")]) == 0
    assert file_hash(tmp_path / "a.emb") == file_hash(tmp_path / "b.emb")
    man = json.loads((tmp_path / "a.emb.manifest.json").read_text())
    test = load_folds(work / "folds.json")[1].test
    assert not set(man["embedding_subjects"]) & test
    assert man["excluded_test_subjects_sha256"]


def test_embed_usage_errors(work, tmp_path):
    base = ["embed", "--cohort", str(work / "cohort.jsonl"), "--fold", "0", "--out", str(tmp_path / "e")]
    assert main(base + ["--method", "cbow", "--folds", str(tmp_path / "nope.json")]) == EXIT_USAGE
    with pytest.raises(SystemExit) as exc:
        main(base + ["--method", "glove", "--folds", str(work / "folds.json")])
    assert exc.value.code == EXIT_USAGE


def test_unknown_outcome_lists_choices(work, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--outcome", "mortality", "--head", "attn", "--cohort", "c", "--folds", "f", "--out", "o"])
    assert exc.value.code == EXIT_USAGE
    err = capsys.readouterr().err
    for k in ("bounceback", "readm30", "mort30", "mort_hosp"):
        assert k in err


def test_help_documents_defaults(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--help"])
    assert exc.value.code == 0
    text = " ".join(capsys.readouterr().out.split())
    for piece in ("mini-batch size (default: 32)", "(default: 0.001)", "(default: 10)", "(default: 0.2,0.3,0.3)",
                  "(default: 64)", "(default: 8000)", "(default: 5)"):
        assert piece in text


def test_train_report(trained):
    rep = json.loads((trained / "report.json").read_text())
    assert rep["schema"] == "cnnattn-report/1" and len(rep["folds"]) == 5
    assert set(rep["mean"]) == {"auroc", "aupr"}
    assert "CNN-Attn" in (trained / "report.txt").read_text()
    man = json.loads((trained / "manifest.json").read_text())
    assert {p.rsplit("/", 1)[-1] for p in man["outputs"]} >= {"report.json", "fold0.ckpt"}


def test_settings_precedence(work, tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[cnnattn]\nformat = 1\nn_folds = 4\nseed = 5\n")
    monkeypatch.setenv("CNNATTN_SEED", "9")
    out = tmp_path / "f.json"
    assert main(["folds", "--cohort", str(work / "cohort.jsonl"), "--out", str(out), "--config", str(cfg)]) == 0
    err = capsys.readouterr().err
    assert "setting n_folds = 4 (file)" in err and "setting seed = 9 (env)" in err
    assert len(load_folds(out)) == 4
    assert main(["folds", "--cohort", str(work / "cohort.jsonl"), "--out", str(out), "--force",
                 "--config", str(cfg), "--seed", "1"]) == 0
    assert "setting seed = 1 (flag)" in capsys.readouterr().err


def test_bad_config_file(work, tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[cnnattn]\nformat = 2\n")
    assert main(["folds", "--cohort", str(work / "cohort.jsonl"), "--out", str(tmp_path / "f"),
                 "--config", str(cfg)]) == EXIT_USAGE


def test_explain_missing_checkpoint_fails_first(work, tmp_path):
    rc = main(["explain", "--checkpoint", str(tmp_path / "none.ckpt"), "--cohort", str(tmp_path / "also-missing"),
               "--folds", str(work / "folds.json"), "--fold", "0", "--mode", "cohort", "--out",
               str(tmp_path / "c.svg")])
    assert rc == EXIT_USAGE and not (tmp_path / "c.svg").exists()


def test_explain_cohort_and_individual(work, trained, tmp_path):
    common = ["--checkpoint", str(trained / "fold0.ckpt"), "--cohort", str(work / "cohort.jsonl"),
              "--folds", str(work / "folds.json"), "--fold", "0"]
    assert main(["explain", *common, "--mode", "cohort", "--out", str(tmp_path / "c.svg")]) == 0
    man = json.loads((tmp_path / "c.svg.manifest.json").read_text())
    n_test = json.loads((trained / "report.json").read_text())["folds"][0]["n_test"]
    assert len(man["stays"]) == -(-n_test // 20)
    assert read_sidecar(tmp_path / "c.tsv")
    stay = json.loads((trained / "report.json").read_text())["folds"][0]["test_stays"][0]
    assert main(["explain", *common, "--mode", "individual", "--stay", str(stay),
                 "--out", str(tmp_path / "i.svg")]) == 0
    assert 0 < len(read_sidecar(tmp_path / "i.tsv")) <= 10


def test_explain_stay_not_in_fold(work, trained, tmp_path):
    rc = main(["explain", "--checkpoint", str(trained / "fold0.ckpt"), "--cohort", str(work / "cohort.jsonl"),
               "--folds", str(work / "folds.json"), "--fold", "0", "--mode", "individual", "--stay", "-5",
               "--out", str(tmp_path / "i.svg")])
    assert rc == EXIT_USAGE


def test_train_with_embedding_files(work, tmp_path):
    for k in range(5):
        assert main(["embed", "--method", "cbow", "--cohort", str(work / "cohort.jsonl"), "--folds",
                     str(work / "folds.json"), "--fold", str(k), "--embed-dim", "8", "--embed-epochs", "1",
                     "--min-doc-freq", "2", "--out", str(tmp_path / f"e{k}.emb")]) == 0
    rc = main(["train", "--outcome", "readm30", "--head", "max", "--cohort", str(work / "cohort.jsonl"),
               "--folds", str(work / "folds.json"), "--embedding", str(tmp_path / "e{fold}.emb"),
               "--out", str(tmp_path / "run"), *TINY])
    assert rc == 0
    # an embedding trained for fold 1 leaks fold 0's test subjects
    (tmp_path / "e0.emb").unlink()
    for suffix in (".emb", ".vocab", ".emb.manifest.json"):
        (tmp_path / f"e0{suffix}").write_bytes((tmp_path / f"e1{suffix}").read_bytes())
    rc = main(["train", "--outcome", "readm30", "--head", "max", "--cohort", str(work / "cohort.jsonl"),
               "--folds", str(work / "folds.json"), "--embedding", str(tmp_path / "e{fold}.emb"),
               "--out", str(tmp_path / "run2"), *TINY])
    assert rc == EXIT_DATA
