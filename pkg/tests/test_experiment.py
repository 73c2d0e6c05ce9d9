import json
import math

import numpy as np
import pytest

import oracles
from metaci.errors import ConfigError
from metaci.experiment import (
    COLUMNS,
    AtePrediction,
    EvalReport,
    ReportRow,
    ate,
    concept_shift_summary,
    emit_report,
    mape,
    merge_reports,
    parse_report,
    report_to_json,
    run_scenario,
    shared_checkpoint_mape,
    validate_report,
    with_aggregates,
)
from metaci.scenario import parse_scenario


def tiny(**over):
    doc = {
        "id": "tiny",
        "dataset": {"kind": "ad", "params": {"n": 60, "p": 5}},
        "omega": 3,
        "k": 2,
        "meta": {"R": 4, "checkpoint_every": 2, "finetune_epochs": 2,
                 "inner": {"epochs": 2, "batch_size": 16, "phi_widths": [4], "h_widths": [4],
                           "nn4_widths": [4, 4, 4, 4]}},
        "grid": {"learning_rate": [0.01], "dropout": [0.0], "eps_phi": [0.5], "eps_h": [0.5]},
        "methods": ["MetaCI", "RandomCI"],
        "seeds": [0],
    }
    doc.update(over)
    return parse_scenario(doc)


# -- metrics -------------------------------------------------------------------

def test_ate_examples():
    assert ate(AtePrediction([3.0, 1.0], [1.0, 2.0], [1, 0])) == 1.5
    y = np.array([1.0, 4.0, -2.0, 0.5])
    assert ate(AtePrediction(y, y, [1, 0, 1, 0])) == 0.0


def test_ate_with_true_counterfactuals_is_eta():
    g = np.random.default_rng(0)
    mu0 = g.normal(size=50)
    mu1 = mu0 + 2.0
    t = np.array([1, 0] * 25)
    y = np.where(t == 1, mu1, mu0)
    y_cf = np.where(t == 1, mu0, mu1)
    assert abs(ate(AtePrediction(y, y_cf, t)) - 2.0) < 1e-12


def test_ate_needs_both_groups():
    with pytest.raises(ConfigError):
        ate(AtePrediction([1.0], [0.0], [1]))
    with pytest.raises(ConfigError):
        AtePrediction([1.0, 2.0], [0.0], [1, 0])


@pytest.mark.parametrize("hat,g,expected", [(0.7, 1.0, 0.3), (1.0, 1.0, 0.0), (2.0, 1.0, 1.0)])
def test_mape_examples(hat, g, expected):
    assert mape(hat, g) == pytest.approx(expected, abs=1e-15)


def test_mape_zero_truth():
    with pytest.raises(ConfigError):
        mape(0.3, 0.0)


def test_mape_error_scaling():
    g = np.random.default_rng(1)
    for _ in range(50):
        c, d, e, truth = g.normal(size=4)
        assert math.isclose(mape(c * truth + d * e, c * truth), abs(d * e) / abs(c * truth),
                            rel_tol=1e-12)


def test_ate_matches_oracle_on_random_inputs():
    g = np.random.default_rng(2)
    for _ in range(30):
        n = int(g.integers(2, 20))
        t = np.zeros(n)
        t[g.choice(n, int(g.integers(1, n)), replace=False)] = 1
        y, y_cf = g.normal(size=n), g.normal(size=n)
        assert abs(ate(AtePrediction(y, y_cf, t)) - oracles.ate_estimate(y, y_cf, t)) < 1e-12


# -- report model ----------------------------------------------------------------

def _row(method, seed, task, ate_hat, ate_g=1.0, dgp="ad-0", status="ok"):
    return ReportRow("task", "s", method, None, seed, task, dgp, 4, 3, 100, 0, "{}",
                     ate_hat, ate_g, abs(ate_g - ate_hat) / abs(ate_g), 0.5, status=status)


def _report():
    rows = [_row("MetaCI", s, t, 1.0 + 0.1 * (s + t)) for s in (0, 1) for t in range(3)]
    rows.append(_row("RandomCI", 0, 0, 0.2))
    rows.append(ReportRow("task", "s", "RandomCI", None, 0, 1, None, 4, 3, status="failed", error="boom"))
    return with_aggregates(rows)


def test_aggregates_are_means_of_members():
    rep = _report()
    for agg in rep.aggregate_rows():
        members = [r for r in rep.task_rows() if r.method == agg.method and r.status == "ok"
                   and (agg.seed is None or r.seed == agg.seed)]
        assert agg.n_members == len(members)
        assert abs(agg.mape - np.mean([m.mape for m in members])) < 1e-12
    assert rep.aggregate("RandomCI").n_members == 1
    assert rep.aggregate("MetaCI", seed=1).n_members == 3


def test_empty_report_is_header_only(tmp_path):
    emit_report(EvalReport(), "csv", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == ",".join(COLUMNS) + "\n"


@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_report_round_trip_and_byte_identity(tmp_path, fmt):
    rep = _report()
    emit_report(rep, fmt, tmp_path / f"a.{fmt}")
    emit_report(rep, fmt, tmp_path / f"b.{fmt}")
    assert (tmp_path / f"a.{fmt}").read_bytes() == (tmp_path / f"b.{fmt}").read_bytes()
    back = parse_report(tmp_path / f"a.{fmt}")
    assert back.rows == rep.rows and back.curves == rep.curves


def test_unknown_format(tmp_path):
    with pytest.raises(ConfigError):
        emit_report(EvalReport(), "xml", tmp_path / "r.xml")


def test_unwritable_path_is_reported(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        emit_report(EvalReport(), "csv", blocker / "r.csv")


def test_schema_rejects_tampering():
    doc = report_to_json(_report())
    validate_report(doc)
    bad = json.loads(json.dumps(doc))
    bad["rows"][0]["mape"] += 0.5
    with pytest.raises(ConfigError, match="MAPE"):
        validate_report(bad)
    bad = json.loads(json.dumps(doc))
    bad["rows"][-1]["mape"] += 0.5
    with pytest.raises(ConfigError, match="mean"):
        validate_report(bad)
    bad = json.loads(json.dumps(doc))
    bad["rows"][0]["method"] = "Magic"
    with pytest.raises(ConfigError, match="schema"):
        validate_report(bad)


def test_merge_recomputes_aggregates():
    a = with_aggregates([_row("MetaCI", 0, 0, 1.2)])
    b = with_aggregates([_row("MetaCI", 1, 0, 1.4)])
    merged = merge_reports([a, b])
    assert merged.aggregate("MetaCI").n_members == 2
    assert merged.aggregate("MetaCI").mape == pytest.approx(0.3)


def test_concept_shift_summary():
    rows = [_row("MetaCI", 0, 0, 1.0, dgp="ad-0"), _row("MetaCI", 0, 1, 3.0, dgp="ad-0"),
            _row("MetaCI", 0, 2, 2.0, dgp="ad-1")]
    s = concept_shift_summary(with_aggregates(rows), ["ad-0", "ad-1"])
    assert s.per_dgp["ad-0"][:2] == (2.0, 1.0)
    assert s.per_dgp["ad-1"][:2] == (2.0, 0.0)
    with pytest.raises(ConfigError, match="no MetaCI rows"):
        concept_shift_summary(with_aggregates(rows), ["ad-0", "ad-1", "ad-2"])
    with pytest.raises(ConfigError, match="unknown DGP"):
        concept_shift_summary(with_aggregates(rows), ["ad-0"])


# -- orchestration ------------------------------------------------------------------

def test_two_task_scenario():
    sc = tiny(omega=2, k=1)
    rep = run_scenario(sc)
    rows = rep.task_rows()
    assert sorted((r.method, r.test_task) for r in rows) == [
        ("MetaCI", 0), ("MetaCI", 1), ("RandomCI", 0), ("RandomCI", 1)]
    assert all(r.status == "ok" for r in rows)
    meta = [c for c in rep.curves if c.phase == "meta" and c.method == "MetaCI" and c.test_task == 0]
    assert [c.step for c in meta] == [1, 2, 3, 4]


def test_every_method_runs(tmp_path):
    sc = tiny(methods=["MetaCI", "RandomCI", "CI_Omega", "MetaNN4", "RandomNN4", "Oracle"])
    rep = run_scenario(sc, out_dir=tmp_path)
    assert {r.method for r in rep.task_rows() if r.status == "ok"} == set(sc.methods)
    assert all(r.status == "ok" for r in rep.task_rows())
    ckpts = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
    assert "tiny-MetaCI-seed0-task0" in ckpts and "tiny-CI_Omega-seed0-task0" in ckpts
    assert not any("Random" in c for c in ckpts)
    assert {r.checkpoint for r in rep.task_rows() if r.method == "MetaCI"} <= {2, 4}
    validate_report(report_to_json(rep))


def test_regime_rows():
    sc = tiny(regimes=["h_gt_phi", "h_eq_phi", "h_lt_phi"], methods=["MetaCI", "RandomCI"])
    rep = run_scenario(sc)
    regimes = {(a.method, a.regime) for a in rep.aggregate_rows() if a.seed is None}
    assert regimes == {("MetaCI", "h_gt_phi"), ("MetaCI", "h_eq_phi"), ("MetaCI", "h_lt_phi"),
                       ("RandomCI", None)}


def test_parallel_matches_serial():
    sc = tiny(seeds=[0, 1])
    a, b = run_scenario(sc, jobs=1), run_scenario(sc, jobs=2)
    assert a.rows == b.rows and a.curves == b.curves


def test_failed_run_becomes_flagged_row():
    sc = tiny(grid={"learning_rate": [1e300], "dropout": [0.0], "eps_phi": [0.5], "eps_h": [0.5]},
              methods=["MetaCI", "Oracle"])
    with np.errstate(all="ignore"):
        rep = run_scenario(sc)
    failed = [r for r in rep.task_rows() if r.status == "failed"]
    assert {r.method for r in failed} == {"MetaCI"}
    assert "MetaTrainError" in failed[0].error
    assert rep.aggregate("MetaCI") is None and rep.aggregate("Oracle") is not None


def test_shared_checkpoint_mape_uses_curves():
    rep = run_scenario(tiny())
    shared = shared_checkpoint_mape(rep)
    cid, value = shared[("MetaCI", None, 0)]
    assert cid in (2, 4) and value >= 0


def test_concept_shift_scenario_tags_rows():
    sc = tiny(omega=4, k=2, concept_shift={"dgp_count": 2}, methods=["Oracle"])
    rep = run_scenario(sc)
    assert [r.dgp_id for r in rep.task_rows()] == ["ad-0", "ad-0", "ad-1", "ad-1"]
    s = concept_shift_summary(rep, ["ad-0", "ad-1"], "Oracle")
    assert set(s.per_dgp) == {"ad-0", "ad-1"}


@pytest.mark.parametrize("over", [
    {"k": 3},
    {"methods": ["Bogus"]},
    {"regimes": ["h_huge"]},
    {"meta": {"R": 0}},
    {"dataset": {"kind": "ad", "params": {"p": 2}}},
    {"concept_shift": {"dgp_count": 2, "variants": [{"p": 7}, {"theta": 2.0}]}},
    {"concept_shift": {"dgp_count": 2, "chunk_map": [0, 0, 3]}},
    {"unexpected": 1},
])
def test_bad_scenarios(over):
    with pytest.raises(ConfigError):
        tiny(**over)


def test_ihdp_joint_scheme_scenario():
    sc = tiny(dataset={"kind": "ihdp", "params": {"n": 240}}, scheme="joint",
              methods=["RandomCI", "MetaNN4", "Oracle"])
    rep = run_scenario(sc)
    rows = rep.task_rows()
    assert all(r.status == "ok" and r.n_omega == 80 for r in rows)
    assert all(abs(r.ate_g - 4.0) < 1e-12 for r in rows)
