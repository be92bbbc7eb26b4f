"""Command-line entry point: ``omoprep <subcommand> [--config c.json] [overrides]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .engine import (ConfigError, PipelineConfig, PlanError, StageFailure, plan, run, stage_complete,
                     verify)

STAGE_COMMANDS = {"profile": [1], "clean": [2], "map": [3], "standardize": [4], "extract": [5],
                  "run-all": [1, 2, 3, 4, 5]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage text and exit 2
        raise UsageError(message)


def _fail(kind: str, message: str, code: int, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, **extra}) + "\n")
    return code


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="pipeline config JSON; flags below override its keys")
    p.add_argument("--input", help="directory of table CSVs or a sites.json manifest")
    p.add_argument("--run-dir")
    p.add_argument("--workers", type=int)
    p.add_argument("--chunk-rows", type=int)
    p.add_argument("--crosswalk")
    p.add_argument("--concept-dictionary")
    p.add_argument("--unit-rules")
    p.add_argument("--tasks")
    p.add_argument("--seed", type=int)
    p.add_argument("--missing-threshold", type=float)
    p.add_argument("--q-lo", type=float)
    p.add_argument("--q-hi", type=float)
    p.add_argument("--merge-window-hours", type=float)
    p.add_argument("--shard-threshold", type=int)
    p.add_argument("--prefix-digits", type=int)
    p.add_argument("--n-min", type=int)
    p.add_argument("--plausibility-delta", type=float)
    p.add_argument("--reference-now")
    p.add_argument("--frozen-outlier-stats", help="reuse cutoffs from an earlier outlier_stats.json")
    p.add_argument("--baseline-report", help="single-worker run_report.json for speedup figures")
    p.add_argument("--skip-profile-flags", action="store_true", default=None,
                   help="clean without stage-1 outputs; no columns are dropped")
    p.add_argument("--report", action="store_true", default=None, help="render figures and CSV summaries")
    p.add_argument("--dry-run", action="store_true", help="print the plan and write nothing")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="omoprep", description="Staged OMOP table preparation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name)
        _pipeline_flags(p)
        if name == "run-all":
            p.add_argument("--featurize", action="store_true", default=None)
    p = sub.add_parser("featurize")
    _pipeline_flags(p)
    p = sub.add_parser("verify")
    p.add_argument("run_dir")
    p = sub.add_parser("report")
    p.add_argument("run_dir")
    p = sub.add_parser("synth")
    p.add_argument("--out", required=True)
    p.add_argument("--sites", type=int, default=2)
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", help="site_profile.json (one object or a list); overrides --sites/--patients")
    p.add_argument("--collision-fraction", type=float, default=0.1)
    p.add_argument("--invalid", type=float, default=0.03)
    p.add_argument("--duplicate", type=float, default=0.01)
    p.add_argument("--temporal", type=float, default=0.005)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--bulk-rows", type=int, default=0, help="also write a bulk MEASUREMENT file of this many rows")
    return parser


def _overrides(args) -> dict:
    keys = ("input", "run_dir", "workers", "chunk_rows", "crosswalk", "concept_dictionary", "unit_rules", "tasks",
            "seed", "missing_threshold", "q_lo", "q_hi", "merge_window_hours", "shard_threshold", "prefix_digits",
            "n_min", "plausibility_delta", "reference_now", "frozen_outlier_stats", "baseline_report",
            "skip_profile_flags", "report", "featurize")
    return {k: getattr(args, k, None) for k in keys}


def _cmd_stages(args) -> int:
    over = _overrides(args)
    over["stages"] = STAGE_COMMANDS[args.command]
    config = PipelineConfig.load(args.config, over)
    ex = plan(config)
    if args.dry_run:
        print(json.dumps(ex.to_dict(), indent=2))
        return 0
    ledger = run(ex, config)
    print(json.dumps({"run_dir": ex.run_dir, "stages": {s.name: ledger.stage(s.name).status for s in ex.stages},
                      "conservation": all(c["pass"] for c in ledger.conservation())}))
    return 0


def _cmd_featurize(args) -> int:
    from .featurizer import load_tasks, run_featurize
    from .parallel import Pool

    config = PipelineConfig.load(args.config, {**_overrides(args), "stages": [5]})
    if not config.run_dir:
        raise PlanError("featurize needs --run-dir")
    run_dir = Path(config.run_dir)
    if not stage_complete(run_dir, 5):
        raise PlanError(f"featurize needs stage5 outputs in {run_dir}")
    if not config.tasks:
        raise PlanError("featurize needs --tasks")
    if args.dry_run:
        print(json.dumps({"run_dir": str(run_dir), "featurize": True, "tasks": config.tasks}))
        return 0
    tasks, sepsis, seed = load_tasks(config.tasks)
    with Pool(config.workers) as pool:
        summary = run_featurize(run_dir, tasks, sepsis, seed, pool, config.chunk_rows)
    print(json.dumps(summary))
    return 0


def _cmd_synth(args) -> int:
    from .synth import DefectSpec, SiteProfile, generate_bulk_measurements, generate_corpus

    profiles = None
    if args.profile:
        doc = json.loads(Path(args.profile).read_text())
        profiles = [SiteProfile.from_dict(d) for d in (doc if isinstance(doc, list) else [doc])]
    spec = DefectSpec(invalid=args.invalid, duplicate=args.duplicate, temporal=args.temporal)
    manifest = generate_corpus(args.out, args.sites, args.patients, args.seed, spec, args.collision_fraction,
                               profiles, workers=args.workers)
    if args.bulk_rows:
        generate_bulk_measurements(Path(args.out) / "bulk" / "MEASUREMENT.csv", args.bulk_rows, seed=args.seed)
    print(json.dumps({"out": args.out, "sites": sorted(manifest["sites"])}))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        return _fail("usage", str(e), 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command in STAGE_COMMANDS:
            return _cmd_stages(args)
        if args.command == "featurize":
            return _cmd_featurize(args)
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "report":
            from .reporting import render_report

            print(json.dumps({"files": [str(p) for p in render_report(args.run_dir)]}))
            return 0
        res = verify(args.run_dir)
        if not res.ok:
            return _fail("verify", "conservation check failed", 1, failures=res.failures)
        print(json.dumps(res.to_dict()))
        return 0
    except (ConfigError, PlanError) as e:
        return _fail(type(e).__name__, str(e), 2)
    except StageFailure as e:
        return _fail("StageFailure", str(e), 1, stage=e.stage)
    except (OSError, ValueError) as e:
        return _fail(type(e).__name__, str(e), 1)


if __name__ == "__main__":
    sys.exit(main())
