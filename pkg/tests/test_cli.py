import json
import shutil

import pytest

from conftest import FIXTURES
from dnnsopf.cli import main

SMALL = {"n_samples": 40, "k_train": 24, "k_test": 16, "epochs": 1}


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "t1.json"
    path.write_text(json.dumps(SMALL))
    return path


@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "run1"
    assert main(["train", "--case", "case14_ieee_pglib", "--config", str(cfg_file), "--out", str(out)]) == 0
    return out


def _manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_train_writes_outputs(trained, capsys):
    assert {p.name for p in trained.iterdir()} == {"checkpoint.json", "history.csv", "epochs.json", "manifest.json"}
    (entry,) = _manifest(trained)
    assert entry["command"] == "train" and entry["seed"] == 0
    assert entry["outputs"] == ["checkpoint.json", "history.csv", "epochs.json"]
    assert len(entry["case_sha256"]) == 64 and entry["config"]["k_train"] == 24
    ck = json.loads((trained / "checkpoint.json").read_text())
    assert ck["metadata"]["case"] == "case14_ieee_pglib"


def test_train_case_path_and_agc(tmp_path, cfg_file):
    out = tmp_path / "agc"
    case = tmp_path / "case14.m"
    shutil.copy(FIXTURES.parent.parent / "src/dnnsopf/data/case14_ieee_pglib.m", case)
    assert main(["train", "--case", str(case), "--config", str(cfg_file), "--mode", "agc", "--out", str(out)]) == 0
    ck = json.loads((out / "checkpoint.json").read_text())
    assert ck["mode"] == "agc" and ck["dims"][0] == 1


def test_missing_case_exit_2(tmp_path, capsys):
    assert main(["train", "--case", str(tmp_path / "nope.m"), "--out", str(tmp_path / "o")]) == 2
    assert "case file not found" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"alpha": 1.5}))
    assert main(["train", "--case", "case6ww", "--config", str(bad),
                 "--out", str(tmp_path / "o")]) == 2
    bad.write_text("{not json")
    assert main(["train", "--case", "case6ww", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "error:" in capsys.readouterr().err


def test_flags_override_config(tmp_path, cfg_file):
    out = tmp_path / "o"
    assert main(["train", "--case", "case6ww", "--config", str(cfg_file), "--alpha", "0.2", "--seed", "3",
                 "--epochs", "0", "--out", str(out)]) == 0
    cfg = _manifest(out)[0]["config"]
    assert (cfg["alpha"], cfg["seed"], cfg["epochs"]) == (0.2, 3, 0)


def test_eval_and_compare(trained, capsys):
    ck = str(trained / "checkpoint.json")
    assert main(["eval", "--case", "case14_ieee_pglib", "--checkpoint", ck, "--out", str(trained)]) == 0
    m = json.loads((trained / "metrics_full.json").read_text())
    assert {"max_violation_pct", "avg_cost", "eval_time", "pf_failures"} <= set(m)
    assert m["n_samples"] == SMALL["k_test"]  # config came from the checkpoint
    assert main(["eval", "--case", "case14_ieee_pglib", "--policy", "baseline", "--checkpoint", ck,
                 "--out", str(trained)]) == 0
    files = [str(trained / "metrics_full.json"), str(trained / "metrics_opf.json")]
    capsys.readouterr()
    assert main(["compare", *files, "--out", str(trained)]) == 0
    table = capsys.readouterr().out
    assert table.count("\n") == 4 and "| opf |" in table
    assert len((trained / "compare.csv").read_text().splitlines()) == 3
    entries = _manifest(trained)
    assert [e["command"] for e in entries] == ["train", "eval", "eval", "compare"]
    outputs = [o for e in entries for o in e["outputs"]]
    assert len(outputs) == len(set(outputs))


def test_compare_single_and_empty(trained, tmp_path):
    main(["eval", "--case", "case14_ieee_pglib", "--checkpoint", str(trained / "checkpoint.json"),
          "--out", str(trained)])
    assert main(["compare", str(trained / "metrics_full.json"), "--out", str(tmp_path / "c")]) == 0
    assert len((tmp_path / "c" / "compare.csv").read_text().splitlines()) == 2
    assert main(["compare", "--out", str(tmp_path / "c")]) == 2


def test_compare_schema_mismatch(trained, tmp_path, capsys):
    main(["eval", "--case", "case14_ieee_pglib", "--checkpoint", str(trained / "checkpoint.json"),
          "--out", str(trained)])
    d = json.loads((trained / "metrics_full.json").read_text())
    d["schema_version"] = 2
    bad = tmp_path / "old.json"
    bad.write_text(json.dumps(d))
    assert main(["compare", str(bad), "--out", str(tmp_path / "c")]) == 2
    assert "schema" in capsys.readouterr().err


def test_dimension_mismatch(trained, capsys):
    rc = main(["eval", "--case", "case118", "--checkpoint", str(trained / "checkpoint.json"),
               "--out", str(trained)])
    assert rc == 2 and "dimension mismatch" in capsys.readouterr().err


def test_pf_command(trained):
    assert main(["pf", "--case", "case14_ieee_pglib", "--out", str(trained)]) == 0
    rep = json.loads((trained / "pf.json").read_text())
    assert len(rep["v"]) == 14 and rep["cost"] > 0
    assert main(["pf", "--case", "case14_ieee_pglib", "--checkpoint", str(trained / "checkpoint.json"),
                 "--out", str(trained)]) == 0


def test_training_abort_exit_1(tmp_path):
    heavy = (FIXTURES / "case2.m").read_text().replace("\t2\t1\t50\t0", "\t2\t1\t4000\t0")
    case = tmp_path / "heavy.m"
    case.write_text(heavy)
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["train", "--case", str(case), "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_writes_only_inside_out(tmp_path, cfg_file, monkeypatch):
    monkeypatch.chdir(tmp_path)
    before = {p.name for p in tmp_path.iterdir()}
    assert main(["train", "--case", "case6ww", "--config", str(cfg_file), "--out", "o"]) == 0
    assert {p.name for p in tmp_path.iterdir()} - before == {"o"}
