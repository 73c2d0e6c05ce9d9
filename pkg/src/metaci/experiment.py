"""Metrics, leave-one-task-out orchestration and report I/O."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np

from .checkpoint import atomic_write_text, config_hash, save_checkpoint
from .cinet import CIConfig, build_nn4, forward, init_params
from .dgp import Dataset, ground_truth_ate
from .errors import ConfigError
from .mathcore import RngStream
from .meta import EPS_PRESETS, MetaConfig, MetaState, expand_grid, meta_train, select_best
from .scenario import METHODS, Scenario, parse_scenario
from .tasking import TaskSet, build_taskset, leave_one_out

log = logging.getLogger(__name__)

__all__ = [
    "AtePrediction",
    "ConceptShiftSummary",
    "CurvePoint",
    "EvalReport",
    "ReportRow",
    "ate",
    "build_scenario_taskset",
    "concept_shift_summary",
    "emit_report",
    "mape",
    "merge_reports",
    "parse_report",
    "run_scenario",
    "validate_report",
]


# --------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class AtePrediction:
    """Factual outcomes ``y``, counterfactual predictions ``y_cf`` (outcome
    under ``1 - t``) and treatments ``t`` for the same rows."""

    y: np.ndarray
    y_cf: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        for name in ("y", "y_cf", "t"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if not (self.y.shape == self.y_cf.shape == self.t.shape) or self.y.ndim != 1:
            raise ConfigError("y, y_cf and t must be vectors of equal length")


def ate(pred: AtePrediction) -> float:
    """Half-weighted sum of the treated and control group effect averages::

        sum_{t=1} (y_i - y_cf_i) / (2 N_1) + sum_{t=0} (y_cf_i - y_i) / (2 N_0)
    """
    treated = pred.t == 1
    n1 = int(treated.sum())
    n0 = pred.t.size - n1
    if n1 == 0 or n0 == 0:
        raise ConfigError("ate needs both treated and control rows")
    return float(np.sum(pred.y[treated] - pred.y_cf[treated]) / (2 * n1)
                 + np.sum(pred.y_cf[~treated] - pred.y[~treated]) / (2 * n0))


def mape(ate_hat: float, ate_g: float) -> float:
    if ate_g == 0:
        raise ConfigError("MAPE is undefined for a zero ground-truth ATE")
    return abs(ate_g - ate_hat) / abs(ate_g)


# --------------------------------------------------------------------------
# report model

ROW_KINDS = ("task", "aggregate")


@dataclass
class ReportRow:
    row_kind: str
    scenario: str
    method: str
    regime: str | None = None
    seed: int | None = None
    test_task: int | None = None
    dgp_id: str | None = None
    omega: int | None = None
    k: int | None = None
    n_omega: int | None = None
    checkpoint: int | None = None
    hypers: str | None = None
    ate: float | None = None
    ate_g: float | None = None
    mape: float | None = None
    val_objective: float | None = None
    n_members: int | None = None
    status: str = "ok"
    error: str | None = None


@dataclass
class CurvePoint:
    scenario: str
    method: str
    regime: str | None
    seed: int
    test_task: int
    phase: str
    step: int
    value: float


#: meta: inner validation objective per meta-iteration; finetune: validation
#: objective per fine-tuning epoch of the selected model; checkpoint_val /
#: checkpoint_ate: best-over-hypers validation objective and test ATE per
#: checkpoint id (``step``)
CURVE_PHASES = ("meta", "finetune", "checkpoint_val", "checkpoint_ate")
COLUMNS = tuple(f.name for f in fields(ReportRow))
CURVE_COLUMNS = tuple(f.name for f in fields(CurvePoint))
_INT_COLS = {"seed", "test_task", "omega", "k", "n_omega", "checkpoint", "n_members"}
_FLOAT_COLS = {"ate", "ate_g", "mape", "val_objective"}


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    curves: list[CurvePoint] = field(default_factory=list)

    def task_rows(self) -> list[ReportRow]:
        return [r for r in self.rows if r.row_kind == "task"]

    def aggregate_rows(self) -> list[ReportRow]:
        return [r for r in self.rows if r.row_kind == "aggregate"]

    def aggregate(self, method: str, seed: int | None = None, regime: str | None = None) -> ReportRow | None:
        for r in self.aggregate_rows():
            if r.method == method and r.seed == seed and r.regime == regime:
                return r
        return None


def _mean(vals: list[float]) -> float:
    return math.fsum(vals) / len(vals)


def with_aggregates(task_rows: Sequence[ReportRow], curves: Sequence[CurvePoint] = ()) -> EvalReport:
    """Attach per-(method, regime, seed) and all-seed aggregate rows.

    Aggregates average over rows with ``status == "ok"``; they carry
    ``seed=None`` when they pool every seed.
    """
    rows = sorted(task_rows, key=_row_key)
    groups: dict[tuple, list[ReportRow]] = {}
    for r in rows:
        if r.status != "ok":
            continue
        for seed in (r.seed, None):
            groups.setdefault((r.scenario, r.method, r.regime or "", -1 if seed is None else seed), []).append(r)
    aggs = []
    for (scenario, method, regime, seed), members in sorted(groups.items()):
        first = members[0]
        aggs.append(ReportRow(
            "aggregate", scenario, method, regime or None, None if seed == -1 else seed,
            omega=first.omega, k=first.k, n_omega=first.n_omega,
            ate=_mean([m.ate for m in members]),
            ate_g=_mean([m.ate_g for m in members]),
            mape=_mean([m.mape for m in members]),
            n_members=len(members),
        ))
    return EvalReport(rows + aggs, sorted(curves, key=_curve_key))


def _row_key(r: ReportRow):
    return (r.scenario, r.method, r.regime or "", -1 if r.seed is None else r.seed,
            -1 if r.test_task is None else r.test_task)


def _curve_key(c: CurvePoint):
    return (c.scenario, c.method, c.regime or "", c.seed, c.test_task, c.phase, c.step)


def merge_reports(reports: Iterable[EvalReport]) -> EvalReport:
    rows, curves = [], []
    for rep in reports:
        rows += rep.task_rows()
        curves += rep.curves
    return with_aggregates(rows, curves)


# --------------------------------------------------------------------------
# report I/O


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(col: str, s: str):
    if s == "":
        return None
    if col in _INT_COLS or col == "step":
        return int(s)
    if col in _FLOAT_COLS or col == "value":
        return float(s)
    return s


def curve_path(path) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}-curve{path.suffix}")


def _csv_text(columns, records) -> str:
    lines = [",".join(columns)]
    for rec in records:
        buf = []
        for c in columns:
            s = _fmt(getattr(rec, c))
            if any(ch in s for ch in ',"\n'):
                s = '"' + s.replace('"', '""') + '"'
            buf.append(s)
        lines.append(",".join(buf))
    return "\n".join(lines) + "\n"


def report_to_json(report: EvalReport) -> dict:
    return {
        "columns": list(COLUMNS),
        "rows": [{c: getattr(r, c) for c in COLUMNS} for r in report.rows],
        "curve_columns": list(CURVE_COLUMNS),
        "curves": [{c: getattr(p, c) for c in CURVE_COLUMNS} for p in report.curves],
    }


def emit_report(report: EvalReport, fmt: str, path) -> list[Path]:
    """Write ``report`` to ``path``; returns the files written.

    CSV output also writes the learning-curve series to ``<stem>-curve.csv``;
    JSON output keeps both in one document.
    """
    path = Path(path)
    try:
        if fmt == "csv":
            atomic_write_text(path, _csv_text(COLUMNS, report.rows))
            atomic_write_text(curve_path(path), _csv_text(CURVE_COLUMNS, report.curves))
            return [path, curve_path(path)]
        if fmt == "json":
            atomic_write_text(path, json.dumps(report_to_json(report), indent=1) + "\n")
            return [path]
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    raise ConfigError(f"unknown report format {fmt!r}")


def parse_report(path) -> EvalReport:
    path = Path(path)
    if path.suffix == ".json":
        doc = json.loads(path.read_text(encoding="utf-8"))
        validate_report(doc)
        return EvalReport([ReportRow(**r) for r in doc["rows"]], [CurvePoint(**c) for c in doc["curves"]])

    def read(p, cls, columns):
        with open(p, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != columns:
                raise ConfigError(f"{p}: unexpected header {header}")
            return [cls(**{c: _parse(c, s) for c, s in zip(header, rec)}) for rec in reader]

    rows = read(path, ReportRow, COLUMNS)
    cp = curve_path(path)
    curves = read(cp, CurvePoint, CURVE_COLUMNS) if cp.exists() else []
    return EvalReport(rows, curves)


_NULLABLE_NUM = {"type": ["number", "null"]}
_NULLABLE_INT = {"type": ["integer", "null"]}
_NULLABLE_STR = {"type": ["string", "null"]}

REPORT_SCHEMA = {
    "type": "object",
    "required": ["columns", "rows", "curves"],
    "properties": {
        "columns": {"type": "array", "items": {"type": "string"}},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": list(COLUMNS),
                "properties": {
                    "row_kind": {"enum": list(ROW_KINDS)},
                    "scenario": {"type": "string"},
                    "method": {"enum": list(METHODS)},
                    "regime": {"enum": [None, *EPS_PRESETS]},
                    "status": {"enum": ["ok", "failed", "abs_error"]},
                    **{c: _NULLABLE_INT for c in _INT_COLS},
                    **{c: _NULLABLE_NUM for c in _FLOAT_COLS},
                    **{c: _NULLABLE_STR for c in ("dgp_id", "hypers", "error")},
                },
            },
        },
        "curve_columns": {"type": "array", "items": {"type": "string"}},
        "curves": {
            "type": "array",
            "items": {
                "type": "object",
                "required": list(CURVE_COLUMNS),
                "properties": {
                    "phase": {"enum": list(CURVE_PHASES)},
                    "step": {"type": "integer"},
                    "value": {"type": "number"},
                },
            },
        },
    },
}


def validate_report(doc: dict) -> None:
    """Check a JSON report document against ``REPORT_SCHEMA`` and its
    arithmetic invariants (MAPE formula, aggregate means)."""
    try:
        jsonschema.validate(doc, REPORT_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"report does not match schema: {exc.message}") from None
    rows = [ReportRow(**r) for r in doc["rows"]]
    for r in rows:
        if r.row_kind == "task" and r.status == "ok":
            if not math.isclose(r.mape, abs(r.ate_g - r.ate) / abs(r.ate_g), rel_tol=1e-12, abs_tol=1e-15):
                raise ConfigError(f"row {r.method}/{r.seed}/{r.test_task}: MAPE inconsistent with ATE")
    expected = with_aggregates([r for r in rows if r.row_kind == "task"]).aggregate_rows()
    got = [r for r in rows if r.row_kind == "aggregate"]
    if len(expected) != len(got):
        raise ConfigError("aggregate rows do not match their members")
    for e, g in zip(expected, got):
        if (e.method, e.seed, e.regime) != (g.method, g.seed, g.regime) or \
                not math.isclose(e.mape, g.mape, rel_tol=1e-12, abs_tol=1e-15):
            raise ConfigError(f"aggregate {g.method}/{g.seed} is not the mean of its members")


# --------------------------------------------------------------------------
# concept-shift summary


@dataclass
class ConceptShiftSummary:
    method: str
    per_dgp: dict[str, tuple[float, float, int]]  # dgp id -> (mean ATE, population variance, rows)
    overall_mape: float

    def rows(self) -> list[dict]:
        return [{"method": self.method, "dgp_id": d, "mu": m, "var": v, "n": n}
                for d, (m, v, n) in sorted(self.per_dgp.items())]


def concept_shift_summary(report: EvalReport, dgp_ids: Sequence[str], method: str = "MetaCI",
                          regime: str | None = None) -> ConceptShiftSummary:
    rows = [r for r in report.task_rows()
            if r.method == method and r.regime == regime and r.status == "ok"]
    groups: dict[str, list[float]] = {d: [] for d in dgp_ids}
    for r in rows:
        if r.dgp_id not in groups:
            raise ConfigError(f"row for test task {r.test_task} has unknown DGP id {r.dgp_id!r}")
        groups[r.dgp_id].append(r.ate)
    per = {}
    for d, vals in groups.items():
        if not vals:
            raise ConfigError(f"no {method} rows for DGP {d!r}")
        per[d] = (float(np.mean(vals)), float(np.var(vals)), len(vals))
    return ConceptShiftSummary(method, per, _mean([r.mape for r in rows]))


# --------------------------------------------------------------------------
# orchestration

_TASKSET, _INIT, _META, _FINETUNE = 1, 3, 4, 5
_METHOD_CODE = {m: i for i, m in enumerate(METHODS)}


def build_scenario_taskset(scenario: Scenario, seed: int) -> TaskSet:
    return build_taskset(scenario.family(), scenario.omega, scenario.k, scenario.chunk_scheme(),
                         RngStream(seed).child(_TASKSET), scenario.dgp_map())


@lru_cache(maxsize=8)
def _cached_taskset(scenario_json: str, seed: int) -> TaskSet:
    return build_scenario_taskset(parse_scenario(json.loads(scenario_json)), seed)


def _is_nn4(method: str) -> bool:
    return method.endswith("NN4")


def _init_network(method: str, config: CIConfig, n_features: int, seed: int, test_id: int):
    rng = RngStream(seed).child(_INIT, test_id, int(_is_nn4(method)))
    if _is_nn4(method):
        return build_nn4(config.replace(alpha=0.0), n_features, rng)
    return init_params(config, n_features, rng)


def method_streams(seed: int, test_id: int, method: str) -> tuple[RngStream, RngStream]:
    """(meta-training stream, fine-tuning stream) for one leave-one-out job."""
    root = RngStream(seed)
    return (root.child(_META, test_id, _METHOD_CODE[method]),
            root.child(_FINETUNE, test_id, _METHOD_CODE[method]))


def _predict_ate(params, ds: Dataset) -> float:
    y_cf = forward(params, ds.X, 1.0 - ds.t)
    return ate(AtePrediction(ds.y, y_cf, ds.t))


def _meta_combos(scenario: Scenario, regime: str | None) -> list[dict]:
    g = scenario.grid
    grid = {"learning_rate": g.learning_rate, "dropout": g.dropout}
    if regime is None:
        grid.update(eps_phi=g.eps_phi, eps_h=g.eps_h)
    combos = expand_grid(grid)
    if regime is not None:
        eps_h, eps_phi = EPS_PRESETS[regime]
        combos = [{**c, "eps_h": eps_h, "eps_phi": eps_phi} for c in combos]
    return combos


def _write_run(run_dir: Path, state: MetaState, cfg: MetaConfig, seed_record: dict, extra: dict) -> None:
    chash = config_hash(cfg.to_dict())
    for it, params in sorted(state.checkpoints.items()):
        save_checkpoint(run_dir / f"ckpt-{it}.json", params, chash, seed_record)
    manifest = {"config": cfg.to_dict(), "config_hash": chash, "seed": seed_record,
                "checkpoints": sorted(state.checkpoints), **extra}
    atomic_write_text(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def run_id(scenario: Scenario, method: str, regime: str | None, seed: int, test_id: int) -> str:
    tag = f"-{regime}" if regime else ""
    return f"{scenario.id}-{method}{tag}-seed{seed}-task{test_id}"


def _run_method(scenario: Scenario, ts: TaskSet, seed: int, test_id: int, method: str,
                regime: str | None, out_dir: Path | None) -> tuple[ReportRow, list[CurvePoint]]:
    train_tasks, test = leave_one_out(ts, test_id)
    test_split = test.split("test")
    row = ReportRow("task", scenario.id, method, regime, seed, test_id, test.dgp_id,
                    scenario.omega, scenario.k, test.n)
    curves: list[CurvePoint] = []
    point = lambda phase, step, value: CurvePoint(  # noqa: E731
        scenario.id, method, regime, seed, test_id, phase, step, float(value))

    if method == "Oracle":
        y_cf = np.where(test_split.t == 1, test_split.mu0, test_split.mu1)
        row.ate = ate(AtePrediction(test_split.y, y_cf, test_split.t))
        return _finish(row, test_split), curves

    base = scenario.meta_config()
    seed_record = {"seed": seed, "test_task": test_id, "method": method, "regime": regime}
    init = _init_network(method, base.inner, test.dataset.p, seed, test_id)
    ft_grid = expand_grid({"learning_rate": scenario.grid.learning_rate, "dropout": scenario.grid.dropout})
    meta_rng, ft_rng = method_streams(seed, test_id, method)

    if method.startswith("Random"):
        checkpoints = {0: init}
    else:
        if method == "CI_Omega":
            # sequential pooled training: same epoch budget as the meta loop, no interpolation
            candidates = [scenario.meta_config(eps_phi=1.0, eps_h=1.0, eps_schedule="constant",
                                               sampling="cyclic", checkpoint_every=base.R)]
        else:
            candidates = [scenario.meta_config(eps_phi=c["eps_phi"], eps_h=c["eps_h"],
                                               inner={"learning_rate": c["learning_rate"],
                                                      "dropout": c["dropout"]})
                          for c in _meta_combos(scenario, regime)]
        best_state, best_cfg, best_score = None, None, math.inf
        for cfg in candidates:
            state = meta_train(train_tasks, cfg, init, meta_rng)
            score = state.mean_val_objective()
            if best_state is None or score < best_score:
                best_state, best_cfg, best_score = state, cfg, score
        checkpoints = best_state.checkpoints
        curves += [point("meta", e.iteration, e.val_objective)
                   for e in best_state.log if e.val_objective is not None]
        if out_dir is not None:
            _write_run(out_dir / "checkpoints" / run_id(scenario, method, regime, seed, test_id),
                       best_state, best_cfg, seed_record,
                       {"train_tasks": [t.task_id for t in train_tasks], "test_task": test_id,
                        "selection_score": best_score})

    sel = select_best(checkpoints, test, ft_grid, base.inner, ft_rng, base.finetune_epochs, record_curve=True)
    curves += [point("finetune", i + 1, v) for i, v in enumerate(sel.result.val_curve)]
    if len(checkpoints) > 1:
        for cid in sorted(checkpoints):
            cand = [e for e in sel.table if e[0] == cid]
            _, _, val, res = min(cand, key=lambda e: e[2])
            curves += [point("checkpoint_val", cid, val),
                       point("checkpoint_ate", cid, _predict_ate(res.params, test_split))]
    row.checkpoint = sel.checkpoint_id
    row.hypers = json.dumps(sel.hypers, sort_keys=True)
    row.val_objective = sel.result.val_objective
    row.ate = _predict_ate(sel.result.params, test_split)
    return _finish(row, test_split), curves


def _finish(row: ReportRow, test_split: Dataset) -> ReportRow:
    row.ate_g = ground_truth_ate(test_split)
    if row.ate_g == 0:
        row.mape, row.status = abs(row.ate - row.ate_g), "abs_error"
    else:
        row.mape = mape(row.ate, row.ate_g)
    return row


def _job(args) -> tuple[ReportRow, list[CurvePoint]]:
    scenario_json, seed, test_id, method, regime, out_dir = args
    scenario = parse_scenario(json.loads(scenario_json))
    try:
        ts = _cached_taskset(scenario_json, seed)
        return _run_method(scenario, ts, seed, test_id, method, regime,
                           Path(out_dir) if out_dir else None)
    except Exception as exc:  # a failed method becomes a flagged row
        log.exception("%s seed=%s task=%s failed", method, seed, test_id)
        return ReportRow("task", scenario.id, method, regime, seed, test_id, None, scenario.omega,
                         scenario.k, status="failed", error=f"{type(exc).__name__}: {exc}"), []


def scenario_jobs(scenario: Scenario, out_dir=None) -> list[tuple]:
    blob = scenario.model_dump_json()
    jobs = []
    for seed in scenario.seeds:
        for test_id in range(scenario.omega):
            for method in scenario.methods:
                regimes = scenario.regimes if (scenario.regimes and method in ("MetaCI", "MetaNN4")) else [None]
                for regime in regimes:
                    jobs.append((blob, seed, test_id, method, regime, str(out_dir) if out_dir else None))
    return jobs


def run_scenario(scenario: Scenario, jobs: int = 1, out_dir=None) -> EvalReport:
    """Leave-one-task-out evaluation of every method, seed and test task.

    For each job the recipe is: meta-train (MetaCI, MetaNN4), sequential
    pooled training (CI_Omega) or nothing (RandomCI, RandomNN4), then
    fine-tuning over checkpoints and the learning-rate/dropout grid on the
    test task's train split, model choice by validation objective, and ATE
    on the held-out test split.
    """
    work = scenario_jobs(scenario, out_dir)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_job, work))
    else:
        results = [_job(w) for w in work]
    rows = [r for r, _ in results]
    curves = [c for _, cs in results for c in cs]
    report = with_aggregates(rows, curves)
    _log_shared_checkpoint(report)
    return report


def shared_checkpoint_mape(report: EvalReport) -> dict[tuple, tuple[int, float]]:
    """MAPE when one checkpoint id is chosen for all test tasks of a run.

    For each (method, regime, seed) the checkpoint with the lowest
    validation objective averaged over test tasks is picked; returns
    ``{(method, regime, seed): (checkpoint id, mean MAPE)}``. The report
    rows themselves use the per-test-task choice.
    """
    val: dict[tuple, dict[int, list[float]]] = {}
    ates: dict[tuple, float] = {}
    for c in report.curves:
        key = (c.method, c.regime, c.seed)
        if c.phase == "checkpoint_val":
            val.setdefault(key, {}).setdefault(c.step, []).append(c.value)
        elif c.phase == "checkpoint_ate":
            ates[key + (c.test_task, c.step)] = c.value
    truth = {(r.method, r.regime, r.seed, r.test_task): r.ate_g for r in report.task_rows() if r.status == "ok"}
    out = {}
    for key, per_ckpt in val.items():
        cid = min(sorted(per_ckpt), key=lambda i: _mean(per_ckpt[i]))
        errs = [abs(g - ates[key + (tid, cid)]) / abs(g)
                for (m, rg, sd, tid), g in truth.items() if (m, rg, sd) == key and g != 0
                and key + (tid, cid) in ates]
        if errs:
            out[key] = (cid, _mean(errs))
    return out


def _log_shared_checkpoint(report: EvalReport) -> None:
    for agg in report.aggregate_rows():
        if agg.seed is None:
            log.info("%s%s: mean MAPE %.4f over %d test tasks (per-task checkpoint choice)", agg.method,
                     f" [{agg.regime}]" if agg.regime else "", agg.mape, agg.n_members)
    for (method, regime, seed), (cid, value) in sorted(shared_checkpoint_mape(report).items(),
                                                       key=lambda kv: (kv[0][0], kv[0][1] or "", kv[0][2])):
        log.info("%s%s seed=%s: shared checkpoint %d gives mean MAPE %.4f", method,
                 f" [{regime}]" if regime else "", seed, cid, value)
