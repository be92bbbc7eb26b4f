"""Stage orchestration: configuration, planning, execution, verification."""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import audit as A
from .audit import RunLedger, TableCounts, finalize_ledger, load_ledger, read_audit_counts
from .context import StageContext
from .ingest import count_rows, find_table_file
from .parallel import Pool, Source, children_peak_rss_kb, load_chunk, make_units, self_peak_rss_kb
from .profiler import DistinctInts, export_stats_json, finish_table, load_flagged_columns, profile_chunk, \
    profile_population
from .schema import TABLE_NAMES, get_schema, parse_datetime

log = logging.getLogger(__name__)

STAGE_NAMES = {1: "stage1", 2: "stage2", 3: "stage3", 4: "stage4", 5: "stage5"}
STAGE_LABELS = {1: "profile", 2: "clean", 3: "map", 4: "standardize", 5: "extract"}
REFERENCE_NOW = "2025-01-01T00:00:00"


class ConfigError(ValueError):
    pass


class PlanError(RuntimeError):
    pass


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"{stage} failed: {cause!r}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineConfig:
    input: Optional[str] = None  # directory of table CSVs, or a sites.json manifest
    run_dir: Optional[str] = None
    workers: int = 8
    chunk_rows: int = 500_000
    stages: List[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    featurize: bool = False
    missing_threshold: float = 0.95
    q_lo: float = 0.01
    q_hi: float = 0.99
    merge_window_hours: float = 2.0
    shard_threshold: int = 30_000
    prefix_digits: int = 4
    n_min: int = 100
    plausibility_delta: float = 100.0
    reference_now: str = REFERENCE_NOW
    crosswalk: Optional[str] = None
    concept_dictionary: Optional[str] = None
    unit_rules: Optional[str] = None
    tasks: Optional[str] = None
    frozen_outlier_stats: Optional[str] = None
    baseline_report: Optional[str] = None
    skip_profile_flags: bool = False
    report: bool = False
    seed: int = 0
    delimiter: str = ","

    def validate(self) -> None:
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers must be an integer >= 1")
        if self.chunk_rows < 1:
            raise ConfigError("chunk_rows must be >= 1")
        if not 0.0 <= self.missing_threshold <= 1.0:
            raise ConfigError("missing_threshold must be in [0, 1]")
        if not 0.0 <= self.q_lo < self.q_hi <= 1.0:
            raise ConfigError("need 0 <= q_lo < q_hi <= 1")
        if self.merge_window_hours < 0:
            raise ConfigError("merge_window_hours must be >= 0")
        if self.shard_threshold < 1 or self.prefix_digits < 1:
            raise ConfigError("shard_threshold and prefix_digits must be >= 1")
        if self.n_min < 1:
            raise ConfigError("n_min must be >= 1")
        if self.plausibility_delta < 0:
            raise ConfigError("plausibility_delta must be >= 0")
        bad = [s for s in self.stages if s not in STAGE_NAMES]
        if bad or not self.stages:
            raise ConfigError(f"stages must be a non-empty subset of 1..5, got {self.stages}")
        self.stages = sorted(set(self.stages))
        try:
            parse_datetime(self.reference_now)
        except ValueError as e:
            raise ConfigError(f"reference_now: {e}") from None

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: Optional[dict] = None) -> "PipelineConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise ConfigError(f"cannot read config {path}: {e}") from None
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
        doc.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return asdict(self)


# ------------------------------------------------------------------ inputs

def load_sources(input_path, delimiter: str = ",") -> Dict[str, List[Source]]:
    """Table sources from a directory, or from a ``sites.json`` manifest (``{"sites": [{site_id, path}]}``)."""
    p = Path(input_path)
    if p.is_file():
        doc = json.loads(p.read_text())
        sites = doc.get("sites", doc) if isinstance(doc, dict) else doc
        out: Dict[str, List[Source]] = {}
        seen = set()
        for s in sites:
            sid, d = s["site_id"], Path(s["path"])
            if not d.is_absolute():
                d = p.parent / d
            if not d.is_dir():
                raise ConfigError(f"site {sid}: directory {d} does not exist")
            if sid in seen:
                raise ConfigError(f"duplicate site id {sid}")
            seen.add(sid)
            for t in TABLE_NAMES:
                f = find_table_file(d, t)
                if f is not None:
                    out.setdefault(t, []).append(Source(t, str(f), sid))
        return out
    if p.is_dir():
        return {t: [Source(t, str(f))] for t in TABLE_NAMES if (f := find_table_file(p, t)) is not None}
    raise ConfigError(f"input {input_path} does not exist")


def is_site_manifest(input_path) -> bool:
    return input_path is not None and Path(input_path).is_file()


# -------------------------------------------------------------------- plan

@dataclass
class PlannedStage:
    number: int
    name: str
    label: str
    inputs: List[str]
    outputs: List[str]
    units: List[dict]


@dataclass
class ExecutionPlan:
    run_dir: str
    stages: List[PlannedStage]
    featurize: bool = False

    def to_dict(self) -> dict:
        return {"run_dir": self.run_dir, "featurize": self.featurize,
                "stages": [asdict(s) for s in self.stages]}


def default_run_dir() -> Path:
    return Path("run") / time.strftime("%Y%m%dT%H%M%S")


def stage_complete(run_dir: Path, n: int) -> bool:
    """A stage's outputs exist: its directory is present and the ledger marks it complete."""
    d = run_dir / STAGE_NAMES[n]
    if not d.is_dir():
        return False
    report = run_dir / "run_report.json"
    if not report.exists():
        return False
    try:
        return load_ledger(run_dir).stage(STAGE_NAMES[n]).status == "complete"
    except (KeyError, ValueError):
        return False


def plan(config: PipelineConfig) -> ExecutionPlan:
    """Ordered stage list with per-stage units; reads inputs but writes nothing."""
    config.validate()
    run_dir = Path(config.run_dir) if config.run_dir else default_run_dir()
    stages = config.stages
    if stages != list(range(stages[0], stages[-1] + 1)):
        raise PlanError(f"stages must be contiguous, got {stages}")
    first = stages[0]
    sources: Dict[str, List[Source]] = {}
    if first <= 2:
        if config.input is None:
            raise PlanError(f"{STAGE_NAMES[first]} needs an input directory or site manifest")
        sources = load_sources(config.input, config.delimiter)
        if not sources:
            raise PlanError(f"no OMOP tables found under {config.input}")
    if first == 2 and not config.skip_profile_flags and not stage_complete(run_dir, 1):
        raise PlanError("stage2 needs stage1 outputs (profile JSON); run stage 1 or pass --skip-profile-flags")
    if first >= 3 and not stage_complete(run_dir, first - 1):
        raise PlanError(f"{STAGE_NAMES[first]} needs {STAGE_NAMES[first - 1]} outputs in {run_dir}")
    if 3 in stages and not config.crosswalk:
        raise PlanError("stage3 needs a crosswalk file")
    if config.crosswalk and 3 in stages and not Path(config.crosswalk).exists():
        raise PlanError(f"crosswalk {config.crosswalk} does not exist")
    if config.featurize:
        if 5 not in stages and not stage_complete(run_dir, 5):
            raise PlanError("featurize needs stage5 outputs")
        if not config.tasks:
            raise PlanError("featurize needs a tasks file")
    planned = []
    for n in stages:
        name = STAGE_NAMES[n]
        units: List[dict] = []
        if n <= 2:
            for t in TABLE_NAMES:
                for u in make_units(sources.get(t, []), config.chunk_rows, config.delimiter):
                    units.append({"table": t, "unit": u.seq, "site_id": u.site_id, "rows": u.span.n_rows,
                                  "path": u.path})
            inputs = sorted({s.path for ss in sources.values() for s in ss})
        else:
            prev = run_dir / STAGE_NAMES[n - 1]
            inputs = [str(prev)]
            kind = "person-partition" if n == 5 else "table-chunk"
            units = [{"table": t, "kind": kind} for t in TABLE_NAMES]
        outputs = [str(run_dir / name)] + ([str(run_dir / "audit")] if n in (2, 3, 4) else [])
        planned.append(PlannedStage(n, name, STAGE_LABELS[n], inputs, outputs, units))
    return ExecutionPlan(str(run_dir), planned, config.featurize)


# --------------------------------------------------------------------- run

def _profile_unit(unit):
    return profile_chunk(load_chunk(unit))


def run_stage1(run_dir: Path, sources: Dict[str, List[Source]], pool: Pool, config: PipelineConfig,
               ledger: RunLedger) -> dict:
    """Per-table chunk partials merged in unit order; distinct persons counted exactly."""
    docs = {}
    tmp = run_dir / "tmp" / "stage1"
    tmp.mkdir(parents=True, exist_ok=True)
    for t in TABLE_NAMES:
        srcs = sources.get(t, [])
        if not srcs:
            continue
        schema = get_schema(t)
        units = make_units(srcs, config.chunk_rows, config.delimiter)
        size = sum(Path(s.path).stat().st_size for s in srcs)
        merged = None
        persons = DistinctInts(tmpdir=tmp)
        # bounded batches keep at most ``workers`` partials in flight
        step = max(1, pool.workers)
        for i in range(0, len(units), step):
            for part in pool.map(_profile_unit, units[i:i + step]):
                persons.update(part.persons)
                part.persons = set()
                merged = part if merged is None else merged.merge(part)
        if merged is None:
            from .profiler import TablePartial
            from .parallel import table_columns

            merged = TablePartial(table_columns(srcs, schema, config.delimiter))
            merged.missing = [0] * len(merged.columns)
        doc = finish_table(schema, merged, size, config.missing_threshold)
        if schema.patient_linked:
            doc["table_profile"]["unique_patient_count"] = persons.count()
        docs[t] = doc
        n = merged.rows + merged.malformed
        ledger.merge_counts("stage1", t, TableCounts(rows_in=n, rows_out=n))

    def paths(t):
        return [s.path for s in sources.get(t, [])] or None

    population = None
    if sources.get("PERSON"):
        population = profile_population(paths("PERSON"), paths("DEATH"), paths("VISIT_DETAIL"),
                                        paths("VISIT_OCCURRENCE"))
    export_stats_json(docs, population, run_dir)
    shutil.rmtree(tmp, ignore_errors=True)
    return {"tables": len(docs), "flagged": {t: d["flagged_columns"] for t, d in docs.items()
                                             if d["flagged_columns"]}}


def _stage_audit_dirs(run_dir: Path, stage: str) -> List[Path]:
    return [run_dir / "audit" / c for c in A.STAGE_CATEGORIES.get(stage, ())]


def quarantine(run_dir: Path, stage: str) -> Path:
    """Move a failed stage's partial outputs to ``<stage>.failed``; earlier stages stay untouched."""
    dest = run_dir / f"{stage}.failed"
    if dest.exists():
        shutil.rmtree(dest)
    dest.mkdir(parents=True)
    src = run_dir / stage
    if src.exists():
        shutil.move(str(src), str(dest / stage))
    for d in _stage_audit_dirs(run_dir, stage):
        if d.exists():
            (dest / "audit").mkdir(exist_ok=True)
            shutil.move(str(d), str(dest / "audit" / d.name))
    shutil.rmtree(run_dir / "tmp" / stage, ignore_errors=True)
    return dest


def _clear_stage(run_dir: Path, stage: str) -> None:
    """Remove outputs of an earlier attempt so appends start from empty files."""
    shutil.rmtree(run_dir / stage, ignore_errors=True)
    for d in _stage_audit_dirs(run_dir, stage):
        shutil.rmtree(d, ignore_errors=True)


def _open_ledger(run_dir: Path, config: PipelineConfig) -> RunLedger:
    if (run_dir / "run_report.json").exists():
        led = load_ledger(run_dir)
        led.config = config.to_dict()
        return led
    return RunLedger(config.to_dict())


def _baseline(config: PipelineConfig) -> Optional[dict]:
    if not config.baseline_report:
        return None
    p = Path(config.baseline_report)
    if not p.exists():
        log.warning("baseline report %s not found; speedup not recorded", p)
        return None
    doc = json.loads(p.read_text())
    return {s: r.get("wall_seconds") for s, r in doc.get("stages", {}).items()}


def _execute_stage(n: int, run_dir: Path, config: PipelineConfig, pool: Pool, ledger: RunLedger,
                   sources: Dict[str, List[Source]]) -> dict:
    name = STAGE_NAMES[n]
    with_site = is_site_manifest(config.input)
    if n == 1:
        return run_stage1(run_dir, sources, pool, config, ledger)
    if n == 2:
        from .cleaner import run_stage2

        ctx = StageContext(run_dir, name, pool, ledger, config.chunk_rows, config.delimiter, with_site,
                           input_sources=sources)
        flagged = {} if config.skip_profile_flags else load_flagged_columns(run_dir)
        res = run_stage2(ctx, flagged, parse_datetime(config.reference_now))
        res["column_dropping"] = not config.skip_profile_flags
        return res
    ctx = StageContext(run_dir, name, pool, ledger, config.chunk_rows, config.delimiter)
    if n == 3:
        from .harmonizer import load_crosswalk, run_stage3

        return run_stage3(ctx, load_crosswalk(config.crosswalk, config.concept_dictionary))
    if n == 4:
        from .standardizer import Stage4Options, UnitRuleSet, load_cutoffs, load_unit_rules, run_stage4

        opts = Stage4Options(UnitRuleSet(load_unit_rules(config.unit_rules)), config.plausibility_delta, config.q_lo,
                             config.q_hi, config.n_min, timedelta(hours=config.merge_window_hours),
                             load_cutoffs(config.frozen_outlier_stats) if config.frozen_outlier_stats else None)
        return run_stage4(ctx, opts)
    from .extractor import run_stage5

    return run_stage5(ctx, config.shard_threshold, config.prefix_digits, timedelta(hours=config.merge_window_hours))


def run(execution_plan: ExecutionPlan, config: PipelineConfig) -> RunLedger:
    """Execute the planned stages in order; a failing stage is quarantined and re-raised."""
    run_dir = Path(execution_plan.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ledger = _open_ledger(run_dir, config)
    baseline = _baseline(config)
    sources = load_sources(config.input, config.delimiter) if config.input and execution_plan.stages[0].number <= 2 \
        else {}
    last = execution_plan.stages[-1].number
    for n in range(last + 1, 6):
        # outputs of later stages no longer follow from the stages re-run here
        if ledger.stage(STAGE_NAMES[n]).status == "complete":
            ledger.stage(STAGE_NAMES[n]).status = "stale"
    with Pool(config.workers) as pool:
        for st in execution_plan.stages:
            rec = ledger.stage(st.name)
            rec.tables = {}
            rec.error = None
            rec.extra = {}
            _clear_stage(run_dir, st.name)
            t0 = time.perf_counter()
            try:
                extra = _execute_stage(st.number, run_dir, config, pool, ledger, sources)
            except Exception as e:
                rec.status = "failed"
                rec.wall_seconds = time.perf_counter() - t0
                rec.error = repr(e)
                rec.extra = {"quarantine": str(quarantine(run_dir, st.name))}
                _record_metrics(ledger, config)
                finalize_ledger(ledger, run_dir)
                raise StageFailure(st.name, e) from e
            rec.wall_seconds = time.perf_counter() - t0
            rec.status = "complete"
            rec.extra = _jsonable(extra or {})
            if baseline and baseline.get(st.name):
                rec.extra["speedup_vs_baseline"] = round(baseline[st.name] / max(rec.wall_seconds, 1e-9), 3)
            shutil.rmtree(run_dir / f"{st.name}.failed", ignore_errors=True)
            finalize_ledger(ledger, run_dir)
            log.info("%s complete in %.1fs", st.name, rec.wall_seconds)
        if execution_plan.featurize:
            from .featurizer import load_tasks, run_featurize

            tasks, sepsis, seed = load_tasks(config.tasks)
            t0 = time.perf_counter()
            summary = run_featurize(run_dir, tasks, sepsis, seed if seed is not None else config.seed, pool,
                                    config.chunk_rows)
            ledger.metrics["featurize"] = {"wall_seconds": round(time.perf_counter() - t0, 6), "tasks": summary}
    shutil.rmtree(run_dir / "tmp", ignore_errors=True)
    _record_metrics(ledger, config)
    finalize_ledger(ledger, run_dir)
    if config.report:
        from .reporting import render_report

        render_report(run_dir)
    return ledger


def _record_metrics(ledger: RunLedger, config: PipelineConfig) -> None:
    ledger.metrics.update({
        "workers": config.workers,
        "chunk_rows": config.chunk_rows,
        "coordinator_peak_rss_kb": self_peak_rss_kb(),
        "worker_peak_rss_kb": children_peak_rss_kb(),
    })


def _jsonable(obj):
    return json.loads(json.dumps(obj, default=str))


# ------------------------------------------------------------------ verify

@dataclass
class VerifyResult:
    ok: bool
    failures: List[str]
    checks: int

    def to_dict(self) -> dict:
        return asdict(self)


def _data_rows(run_dir: Path, stage: str, table: str, delimiter: str) -> Optional[int]:
    f = find_table_file(run_dir / stage, table)
    return None if f is None else count_rows(f, delimiter)


def _stage5_rows(run_dir: Path) -> Dict[str, int]:
    """Recount extracted rows per table from patient and orphan files."""
    from collections import Counter

    out: Counter = Counter()
    root = run_dir / "stage5"
    for f in root.glob("orphans/*.csv"):
        out[f.stem] += count_rows(f)
    pat = root / "patients"
    if pat.is_dir():
        for f in pat.rglob("*.csv"):
            if f.name != "icu_stays.csv":
                out[f.stem] += count_rows(f)
    return dict(out)


def verify(run_dir, delimiter: str = ",") -> VerifyResult:
    """Re-check conservation from the files on disk, not from the ledger alone."""
    run_dir = Path(run_dir)
    failures: List[str] = []
    checks = 0
    try:
        ledger = load_ledger(run_dir)
    except (OSError, ValueError, KeyError) as e:
        return VerifyResult(False, [f"run_report.json unreadable: {e}"], 1)
    audits = read_audit_counts(run_dir)
    s5_rows = None
    prev_out: Dict[str, int] = {}
    for stage in A.STAGES:
        rec = ledger.stage(stage)
        if rec.status != "complete":
            if rec.status == "failed":
                failures.append(f"{stage}: marked failed ({rec.error})")
            continue
        cats = A.STAGE_CATEGORIES.get(stage, ())
        for table, c in sorted(rec.tables.items()):
            checks += 1
            if not c.conserved():
                failures.append(f"{stage}/{table}: rows_in {c.rows_in} != rows_out {c.rows_out} + removed "
                                f"{c.rows_removed}")
            if stage in ("stage2", "stage3", "stage4"):
                n = _data_rows(run_dir, stage, table, delimiter)
                checks += 1
                if n != c.rows_out:
                    failures.append(f"{stage}/{table}: output file has {n} rows, ledger says {c.rows_out}")
                for cat in cats:
                    found = audits.get((cat, table), {})
                    for action, expect in ((A.REMOVED, c.removed.get(cat, 0)),
                                           (A.REWRITTEN, c.rewritten.get(cat, 0)),
                                           (A.LOGGED, c.logged.get(cat, 0))):
                        checks += 1
                        got = found.get(action, 0)
                        if got != expect:
                            failures.append(f"{stage}/{table}: audit/{cat} has {got} {action} rows, "
                                            f"ledger says {expect}")
            if stage == "stage5":
                if s5_rows is None:
                    s5_rows = _stage5_rows(run_dir)
                checks += 1
                if s5_rows.get(table, 0) != c.rows_out:
                    failures.append(f"stage5/{table}: extracted files hold {s5_rows.get(table, 0)} rows, "
                                    f"ledger says {c.rows_out}")
            if table in prev_out:
                checks += 1
                if prev_out[table] != c.rows_in:
                    failures.append(f"{stage}/{table}: rows_in {c.rows_in} != previous stage rows_out "
                                    f"{prev_out[table]}")
        if stage != "stage1":
            prev_out = {t: c.rows_out for t, c in rec.tables.items()}
        else:
            prev_out = {}
    return VerifyResult(not failures, failures, checks)
