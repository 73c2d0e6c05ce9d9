import json
import subprocess
import sys

import pytest

from metaci.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from metaci.experiment import parse_report, report_to_json, validate_report

SCENARIO = {
    "id": "cli",
    "dataset": {"kind": "ad", "params": {"n": 60, "p": 5}},
    "omega": 3,
    "k": 2,
    "meta": {"R": 2, "checkpoint_every": 1, "finetune_epochs": 1,
             "inner": {"epochs": 1, "batch_size": 16, "phi_widths": [4], "h_widths": [4]}},
    "grid": {"learning_rate": [0.01], "dropout": [0.0], "eps_phi": [0.5], "eps_h": [0.5]},
    "methods": ["MetaCI", "RandomCI"],
    "seeds": [0],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "scenario.json"
    path.write_text(json.dumps(SCENARIO))
    return path


def test_generate(config, tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["generate", "--config", str(config), "--out", str(out), "--seed", "4"]) == EXIT_OK
    files = sorted(p.name for p in (out / "seed-4").iterdir())
    assert files == ["task-0.csv", "task-1.csv", "task-2.csv", "taskset.json"]
    manifest = json.loads((out / "seed-4" / "taskset.json").read_text())
    assert [t["n"] for t in manifest["tasks"]] == [60, 60, 60]
    main(["generate", "--config", str(config), "--out", str(out / "blind"), "--no-truth"])
    header = (out / "blind" / "seed-0" / "task-0.csv").read_text().splitlines()[0]
    assert header == "x1,x2,x3,x4,x5,t,y"


def test_train_writes_checkpoints(config, tmp_path):
    out = tmp_path / "runs"
    assert main(["train", "--config", str(config), "--test-task", "1", "--out", str(out)]) == EXIT_OK
    run = out / "cli-MetaCI-seed0-task1"
    assert sorted(p.name for p in run.iterdir()) == ["ckpt-1.json", "ckpt-2.json", "manifest.json"]
    assert json.loads((run / "manifest.json").read_text())["train_tasks"] == [0, 2]


def test_train_rejects_baselines_and_bad_task(config, tmp_path):
    assert main(["train", "--config", str(config), "--method", "RandomCI", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--config", str(config), "--test-task", "9", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_eval_and_report(config, tmp_path, capsys):
    out = tmp_path / "res"
    assert main(["eval", "--config", str(config), "--out", str(out), "--format", "json"]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "MetaCI" in printed and "RandomCI" in printed
    doc = json.loads((out / "report.json").read_text())
    validate_report(doc)
    assert (out / "checkpoints" / "cli-MetaCI-seed0-task0" / "ckpt-2.json").exists()

    merged = tmp_path / "merged.csv"
    assert main(["report", str(out / "report.json"), "--out", str(merged)]) == EXIT_OK
    assert report_to_json(parse_report(merged))["rows"] == doc["rows"]


def test_eval_method_subset(config, tmp_path):
    out = tmp_path / "res"
    assert main(["eval", "--config", str(config), "--out", str(out), "--method", "RandomCI"]) == EXIT_OK
    rows = parse_report(out / "report.csv").task_rows()
    assert {r.method for r in rows} == {"RandomCI"}


def test_eval_concept_shift_table(tmp_path):
    doc = dict(SCENARIO, omega=4, concept_shift={"dgp_count": 2}, methods=["Oracle"])
    path = tmp_path / "cs.json"
    path.write_text(json.dumps(doc))
    assert main(["eval", "--config", str(path), "--out", str(tmp_path / "o")]) == EXIT_OK
    table = json.loads((tmp_path / "o" / "concept_shift.json").read_text())
    assert [r["dgp_id"] for r in table] == ["ad-0", "ad-1"]


def test_config_errors_exit_1(tmp_path, capsys):
    assert main(["eval", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["eval", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    bad.write_text(json.dumps(dict(SCENARIO, k=5)))
    assert main(["eval", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path):
    missing = tmp_path / "missing.csv"
    assert main(["report", str(missing), "--out", str(tmp_path / "m.csv")]) == EXIT_RUNTIME


def test_module_entry_point(config, tmp_path):
    proc = subprocess.run([sys.executable, "-m", "metaci", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
