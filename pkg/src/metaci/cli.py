"""Command-line entry point.

    metaci generate --config scenario.json --out data/
    metaci train    --config scenario.json --test-task 0 --out runs/
    metaci eval     --config scenario.json --out results/ --format csv --jobs 4
    metaci report   results/a.csv results/b.csv --out merged.json --format json

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .experiment import (
    _init_network,
    build_scenario_taskset,
    method_streams,
    concept_shift_summary,
    emit_report,
    merge_reports,
    parse_report,
    run_scenario,
    shared_checkpoint_mape,
)
from .meta import meta_train
from .scenario import Scenario, load_scenario
from .tasking import leave_one_out

log = logging.getLogger("metaci")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _scenario(args) -> Scenario:
    scenario = load_scenario(args.config)
    updates = {}
    if args.seed is not None:
        updates["seeds"] = [args.seed]
    if getattr(args, "method", None):
        updates["methods"] = [m.strip() for m in args.method.split(",") if m.strip()]
    if updates:
        scenario = Scenario.model_validate({**scenario.model_dump(), **updates})
    return scenario


def cmd_generate(args) -> None:
    scenario = _scenario(args)
    out = Path(args.out)
    for seed in scenario.seeds:
        ts = build_scenario_taskset(scenario, seed)
        d = out / f"seed-{seed}"
        d.mkdir(parents=True, exist_ok=True)
        ts.write_manifest(d / "taskset.json")
        for task in ts.tasks:
            task.dataset.to_csv(d / f"task-{task.task_id}.csv", include_truth=not args.no_truth)
        log.info("seed %d: wrote %d tasks to %s", seed, len(ts.tasks), d)


def cmd_train(args) -> None:
    scenario = _scenario(args)
    method = scenario.methods[0]
    if method not in ("MetaCI", "MetaNN4"):
        raise ConfigError(f"train runs the meta loop; method must be MetaCI or MetaNN4, got {method}")
    if not 0 <= args.test_task < scenario.omega:
        raise ConfigError(f"--test-task must lie in [0, {scenario.omega})")
    cfg = scenario.meta_config()
    for seed in scenario.seeds:
        ts = build_scenario_taskset(scenario, seed)
        train_tasks, test = leave_one_out(ts, args.test_task)
        init = _init_network(method, cfg.inner, test.dataset.p, seed, args.test_task)
        run_dir = Path(args.out) / f"{scenario.id}-{method}-seed{seed}-task{args.test_task}"
        state = meta_train(train_tasks, cfg, init, method_streams(seed, args.test_task, method)[0], run_dir,
                           {"seed": seed, "test_task": args.test_task, "method": method})
        log.info("seed %d: %d iterations, checkpoints %s in %s", seed, state.iteration,
                 sorted(state.checkpoints), run_dir)


def cmd_eval(args) -> None:
    scenario = _scenario(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_scenario(scenario, jobs=args.jobs, out_dir=out)
    written = emit_report(report, args.format, out / f"report.{args.format}")
    if scenario.concept_shift is not None:
        ids = [d.dgp_id for d in scenario.family()]
        rows = []
        for method in scenario.methods:
            if any(r.method == method and r.status == "ok" for r in report.task_rows()):
                s = concept_shift_summary(report, ids, method)
                rows += [{**r, "overall_mape": s.overall_mape} for r in s.rows()]
        path = out / "concept_shift.json"
        path.write_text(json.dumps(rows, indent=1) + "\n", encoding="utf-8")
        written.append(path)
    failed = [r for r in report.task_rows() if r.status == "failed"]
    for agg in report.aggregate_rows():
        if agg.seed is None:
            print(f"{agg.method:10s} {agg.regime or '':9s} mean MAPE {agg.mape:.4f}  (n={agg.n_members})")
    for (method, regime, seed), (cid, value) in sorted(shared_checkpoint_mape(report).items(),
                                                       key=lambda kv: (kv[0][0], kv[0][1] or "", kv[0][2])):
        log.info("%s seed %s: shared checkpoint %d -> MAPE %.4f", method, seed, cid, value)
    for p in written:
        log.info("wrote %s", p)
    if failed:
        log.warning("%d method runs failed; see the status/error columns", len(failed))


def cmd_report(args) -> None:
    reports = [parse_report(p) for p in args.inputs]
    merged = merge_reports(reports)
    for p in emit_report(merged, args.format, args.out):
        log.info("wrote %s", p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metaci", description=__doc__.splitlines()[0] if __doc__ else None)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", required=True, help="scenario JSON file")
        p.add_argument("--seed", type=int, help="run a single seed instead of the scenario's list")
        p.add_argument("--out", required=out_required, help="output directory")

    p = sub.add_parser("generate", help="write task datasets and taskset manifests")
    common(p)
    p.add_argument("--no-truth", action="store_true", help="omit mu0/mu1 from dataset CSVs")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="meta-train for one scenario and test task")
    common(p)
    p.add_argument("--test-task", type=int, default=0)
    p.add_argument("--method", default="MetaCI")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full leave-one-task-out evaluation")
    common(p)
    p.add_argument("--method", help="comma-separated subset of methods")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge and reformat reports")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True, help="output file")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
