"""Cohorts, labels and binned feature matrices for the ICU prediction tasks.

Every task has an observation window, a 48h gap and a prediction window that
starts at ``observation end + gap``. Features only ever come from the
observation window, which is checked per emitted row.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .extractor import (DensityIndex, IcuStay, load_bundle, shard_path)
from .ingest import find_table_file, iter_rows, read_header, rows_to_text
from .parallel import Pool, Unit, load_chunk, make_units, Source
from .schema import get_schema, parse_datetime, parse_float, parse_int

log = logging.getLogger(__name__)

HOUR = timedelta(hours=1)
DAY = timedelta(days=1)
GAP = timedelta(hours=48)
BIN = timedelta(hours=4)

QUOTAS = (("MEASUREMENT", 400), ("OBSERVATION", 200), ("DRUG_EXPOSURE", 100),
          ("CONDITION_OCCURRENCE", 50), ("PROCEDURE_OCCURRENCE", 50))
NUMERIC_TABLES = ("MEASUREMENT", "OBSERVATION")

TASK_NAMES = ("mortality_7d", "mortality_30d", "los_gt3d", "los_gt7d", "readmit_7d", "readmit_30d",
              "readmit_90d", "sepsis_after_icu", "sepsis_48h", "sepsis_7d")


class ConfigError(ValueError):
    pass


class LeakageError(AssertionError):
    pass


# ------------------------------------------------------------- vocabulary

@dataclass
class FeatureVocabulary:
    concepts: Dict[str, List[int]]
    quotas: Dict[str, int]
    frequencies: Dict[str, Dict[int, int]] = field(default_factory=dict)

    @property
    def shortfall(self) -> Dict[str, int]:
        return {t: q - len(self.concepts.get(t, [])) for t, q in self.quotas.items()
                if len(self.concepts.get(t, [])) < q}

    def sizes(self) -> Dict[str, int]:
        return {t: len(self.concepts.get(t, [])) for t in self.quotas}

    def items(self) -> List[Tuple[str, int]]:
        return [(t, c) for t, _ in QUOTAS if t in self.quotas for c in self.concepts.get(t, [])]

    def to_dict(self) -> dict:
        return {"quotas": self.quotas, "sizes": self.sizes(), "shortfall": self.shortfall,
                "concepts": self.concepts}


def top_k(freq: Dict[int, int], k: int) -> List[int]:
    """Descending frequency, ties to the lower concept id."""
    return [c for c, _ in sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def _count_unit(unit: Unit) -> Counter:
    chunk = load_chunk(unit)
    ci = chunk.columns.index(chunk.schema.primary_concept_column)
    c: Counter = Counter()
    for row in chunk.rows:
        v = parse_int(row[ci])
        if v is not None and v != 0:
            c[v] += 1
    return c


def select_top_concepts(stage4_dir, quotas: Sequence[Tuple[str, int]] = QUOTAS, pool: Optional[Pool] = None,
                        chunk_rows: int = 500_000) -> FeatureVocabulary:
    pool = pool or Pool(1)
    concepts, freqs = {}, {}
    for table, q in quotas:
        p = find_table_file(stage4_dir, table)
        freq: Counter = Counter()
        if p is not None:
            for c in pool.map(_count_unit, make_units([Source(table, str(p))], chunk_rows)):
                freq.update(c)
        concepts[table] = top_k(freq, q)
        freqs[table] = dict(freq)
        if len(concepts[table]) < q:
            log.warning("%s: only %d distinct concepts for a quota of %d", table, len(concepts[table]), q)
    return FeatureVocabulary(concepts, dict(quotas), freqs)


# ------------------------------------------------------------------ tasks

@dataclass(frozen=True)
class TaskSpec:
    name: str
    family: str  # mortality | los | readmission | sepsis
    anchor: str  # stay_start | stay_end
    obs_offset: timedelta  # observation start relative to the anchor
    obs_length: timedelta
    gap: timedelta = GAP
    horizon: Optional[timedelta] = None  # None means unbounded
    threshold: Optional[timedelta] = None  # LOS tasks
    min_stay: timedelta = timedelta(0)

    def __post_init__(self):
        if self.gap < timedelta(0) or self.obs_length <= timedelta(0):
            raise ConfigError(f"{self.name}: bad window")

    def observation(self, stay: IcuStay) -> Tuple[datetime, datetime]:
        a = stay.start if self.anchor == "stay_start" else stay.end
        s = a + self.obs_offset
        return s, s + self.obs_length

    def prediction_start(self, stay: IcuStay) -> datetime:
        return self.observation(stay)[1] + self.gap

    @property
    def n_bins(self) -> int:
        return int(self.obs_length / BIN)


def default_tasks() -> Dict[str, TaskSpec]:
    h48, h24 = 48 * HOUR, 24 * HOUR
    t = {}
    for d in (7, 30):
        t[f"mortality_{d}d"] = TaskSpec(f"mortality_{d}d", "mortality", "stay_start", timedelta(0), h48,
                                        horizon=d * DAY, min_stay=h48 + GAP)
    for d in (3, 7):
        t[f"los_gt{d}d"] = TaskSpec(f"los_gt{d}d", "los", "stay_start", timedelta(0), h24,
                                    threshold=d * DAY, min_stay=h24)
    for d in (7, 30, 90):
        t[f"readmit_{d}d"] = TaskSpec(f"readmit_{d}d", "readmission", "stay_end", -h48, h48,
                                      horizon=d * DAY, min_stay=h48)
    # the observation window closes 48h before admission so the label window can open at admission
    t["sepsis_after_icu"] = TaskSpec("sepsis_after_icu", "sepsis", "stay_start", -72 * HOUR, h24)
    t["sepsis_48h"] = TaskSpec("sepsis_48h", "sepsis", "stay_start", -72 * HOUR, h24, horizon=h48)
    t["sepsis_7d"] = TaskSpec("sepsis_7d", "sepsis", "stay_start", -72 * HOUR, h24, horizon=7 * DAY)
    return t


def _td(v) -> Optional[timedelta]:
    return None if v is None else timedelta(hours=float(v))


def load_tasks(path) -> Tuple[Dict[str, TaskSpec], List[int], int]:
    """(task specs, sepsis concept ids, seed) from ``tasks.json``.

    Tasks default to the built-in definitions; a task entry may override any
    window field in hours. The sepsis concept set is required.
    """
    doc = json.loads(Path(path).read_text())
    sepsis = [int(x) for x in doc.get("sepsis_concept_ids", [])]
    if not sepsis:
        raise ConfigError("tasks.json: sepsis_concept_ids must be a non-empty list")
    tasks = default_tasks()
    wanted = doc.get("tasks")
    if isinstance(wanted, list):
        unknown = [w for w in wanted if w not in tasks]
        if unknown:
            raise ConfigError(f"unknown tasks {unknown}")
        tasks = {k: tasks[k] for k in wanted}
    elif isinstance(wanted, dict):
        out = {}
        for name, over in wanted.items():
            if name not in tasks:
                raise ConfigError(f"unknown task {name}")
            base = asdict(tasks[name])
            for key in ("obs_offset", "obs_length", "gap", "horizon", "threshold", "min_stay"):
                if key + "_hours" in over:
                    base[key] = _td(over[key + "_hours"])
            if "anchor" in over:
                base["anchor"] = over["anchor"]
            out[name] = TaskSpec(**base)
        tasks = out
    return tasks, sepsis, int(doc.get("seed", 0))


# ----------------------------------------------------------------- labels

def label_mortality(stay: IcuStay, death: Optional[datetime], horizon: timedelta) -> int:
    return int(death is not None and stay.start < death <= stay.start + horizon)


def label_los(stay: IcuStay, threshold: timedelta) -> int:
    return int(stay.end - stay.start > threshold)


def label_readmission(stays: Sequence[IcuStay], index: int, horizon: timedelta, gap: timedelta = GAP) -> int:
    end = stays[index].end
    lo, hi = end + gap, end + gap + horizon
    return int(any(lo < s.start <= hi for j, s in enumerate(stays) if j != index and s.start > end))


def label_sepsis(stay: IcuStay, events: Sequence[datetime], start: datetime,
                 horizon: Optional[timedelta]) -> int:
    """``horizon`` None: any event after stay start. Otherwise an event in (start, start + horizon]."""
    if horizon is None:
        return int(any(e > stay.start for e in events))
    return int(any(start < e <= start + horizon for e in events))


def label_stay(task: TaskSpec, stays: Sequence[IcuStay], index: int, death: Optional[datetime],
               sepsis_events: Sequence[datetime]) -> Tuple[Optional[int], str]:
    """(label, "") for an eligible stay, or (None, exclusion reason)."""
    stay = stays[index]
    dur = stay.end - stay.start
    if dur < task.min_stay:
        return None, "short_stay"
    pstart = task.prediction_start(stay)
    if task.family == "mortality":
        if death is not None and death <= pstart:
            return None, "death_before_prediction_window"
        return label_mortality(stay, death, task.horizon), ""
    if task.family == "los":
        return label_los(stay, task.threshold), ""
    if task.family == "readmission":
        return label_readmission(stays, index, task.horizon, task.gap), ""
    if task.family == "sepsis":
        if any(e <= pstart for e in sepsis_events):
            return None, "sepsis_before_prediction_window"
        return label_sepsis(stay, sepsis_events, pstart, task.horizon), ""
    raise ConfigError(f"unknown task family {task.family}")


# --------------------------------------------------------------- features

def feature_columns(vocab: FeatureVocabulary, n_bins: int) -> List[str]:
    cols = []
    for table, c in vocab.items():
        for b in range(n_bins):
            if table in NUMERIC_TABLES:
                cols.append(f"{table}:{c}:b{b}:mean")
                cols.append(f"{table}:{c}:b{b}:count")
            else:
                cols.append(f"{table}:{c}:b{b}:count")
    return cols


@dataclass
class Event:
    table: str
    concept: int
    time: datetime
    value: Optional[float] = None


def bin_index(t: datetime, start: datetime) -> int:
    return int((t - start) // BIN)


def _layout(vocab: FeatureVocabulary):
    """Slot index per (table, concept) and contiguous per-table slot ranges, in column order."""
    items = vocab.items()
    slots = {k: i for i, k in enumerate(items)}
    blocks = []
    for table, _ in QUOTAS:
        idx = [i for i, (t, _) in enumerate(items) if t == table]
        if idx:
            blocks.append((table in NUMERIC_TABLES, idx[0], idx[-1] + 1))
    return slots, blocks


def build_feature_row(events: Iterable[Event], vocab: FeatureVocabulary, obs: Tuple[datetime, datetime],
                      n_bins: int, layout=None) -> Tuple[np.ndarray, Optional[datetime]]:
    """(flat feature values, latest timestamp used). Window is half-open [start, end).

    Numeric tables contribute (mean, count) per bin, the others a count per bin;
    an empty numeric bin has mean NaN.
    """
    start, end = obs
    slots, blocks = layout or _layout(vocab)
    n = len(slots)
    sums = np.zeros((n, n_bins))
    nums = np.zeros((n, n_bins))
    counts = np.zeros((n, n_bins))
    latest = None
    for e in events:
        if not start <= e.time < end:
            continue
        i = slots.get((e.table, e.concept))
        if i is None:
            continue
        b = bin_index(e.time, start)
        if not 0 <= b < n_bins:
            continue
        counts[i, b] += 1
        if e.value is not None:
            sums[i, b] += e.value
            nums[i, b] += 1
        if latest is None or e.time > latest:
            latest = e.time
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(nums > 0, sums / np.where(nums > 0, nums, 1), np.nan)
    parts = []
    for numeric, lo, hi in blocks:
        if numeric:
            parts.append(np.stack([means[lo:hi], counts[lo:hi]], axis=2).ravel())
        else:
            parts.append(counts[lo:hi].ravel())
    return (np.concatenate(parts) if parts else np.zeros(0)), latest


def check_leakage(latest: Optional[datetime], prediction_start: datetime, gap: timedelta = GAP) -> None:
    if latest is not None and not latest < prediction_start - gap + timedelta(0):
        raise LeakageError(f"feature at {latest} is within {gap} of the label window at {prediction_start}")


# ------------------------------------------------------------ per patient

def bundle_events(bundle, tables: Iterable[str]) -> List[Event]:
    out = []
    for table in tables:
        rows = bundle.tables.get(table)
        if not rows:
            continue
        cols = bundle.columns[table]
        s = get_schema(table)
        ci = cols.index(s.primary_concept_column)
        ti = [cols.index(c) for c in (s.start_column, s.start_date_column) if c and c in cols]
        vi = cols.index("value_as_number") if "value_as_number" in cols else None
        for r in rows:
            c = parse_int(r[ci])
            t = None
            for i in ti:
                if r[i].strip():
                    t = parse_datetime(r[i])
                    break
            if c is None or t is None:
                continue
            out.append(Event(table, c, t, parse_float(r[vi]) if vi is not None else None))
    return out


def bundle_death(bundle) -> Optional[datetime]:
    rows = bundle.tables.get("DEATH")
    if not rows:
        return None
    cols = bundle.columns["DEATH"]
    times = []
    for r in rows:
        for c in ("death_datetime", "death_date"):
            if c in cols and r[cols.index(c)].strip():
                times.append(parse_datetime(r[cols.index(c)]))
                break
    return min(times) if times else None


def bundle_sepsis(bundle, sepsis: frozenset) -> List[datetime]:
    return sorted(e.time for e in bundle_events(bundle, ["CONDITION_OCCURRENCE"]) if e.concept in sepsis)


@dataclass(frozen=True)
class PatientTaskJob:
    patient_dirs: Tuple[str, ...]
    tasks: Tuple[TaskSpec, ...]
    vocab: FeatureVocabulary
    sepsis: frozenset
    has_death_table: bool
    part_dir: Optional[str] = None  # rows go to part files here instead of being returned
    seq: int = 0


def _row_line(pid: int, index: int, start: datetime, label: int, feats) -> str:
    return f"{pid},{index},{start.isoformat()},{label},{_fmt_row(np.asarray(feats, dtype=float))}\n"


def featurize_patients(job: PatientTaskJob) -> dict:
    """Labels and features for a batch of patients.

    With ``part_dir`` set, each task's rows are written as CSV lines to
    ``<part_dir>/<task>/<seq>.part`` and only their paths and counts come back.
    """
    rows: Dict[str, list] = defaultdict(list)
    log_rows: Dict[str, list] = defaultdict(list)
    tables = [t for t, _ in QUOTAS]
    layout = _layout(job.vocab)
    for d in job.patient_dirs:
        b = load_bundle(d)
        stays = sorted(b.stays, key=lambda s: s.start)
        if not stays:
            continue
        events = bundle_events(b, tables)
        death = bundle_death(b) if job.has_death_table else None
        sepsis = bundle_sepsis(b, job.sepsis)
        for task in job.tasks:
            for i, stay in enumerate(stays):
                label, why = label_stay(task, stays, i, death, sepsis)
                key = [str(b.person_id), str(i), stay.start.isoformat()]
                if label is None:
                    log_rows[task.name].append(key + ["excluded", why])
                    continue
                obs = task.observation(stay)
                feats, latest = build_feature_row(events, job.vocab, obs, task.n_bins, layout)
                check_leakage(latest, task.prediction_start(stay), task.gap)
                if job.part_dir is None:
                    rows[task.name].append((b.person_id, stay.start, i, label, feats))
                else:
                    rows[task.name].append((b.person_id, label, _row_line(b.person_id, i, stay.start, label, feats)))
                log_rows[task.name].append(key + ["included", ""])
    if job.part_dir is None:
        return {"rows": dict(rows), "log": dict(log_rows)}
    parts = {}
    for task in job.tasks:
        got = rows.get(task.name, [])
        p = Path(job.part_dir) / task.name / f"{job.seq:06d}.part"
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("".join(r[2] for r in got), encoding="utf-8")
        parts[task.name] = {"path": str(p), "persons": [r[0] for r in got], "positives": sum(r[1] for r in got)}
    return {"parts": parts, "log": dict(log_rows)}


# ----------------------------------------------------------------- export

def split_persons(persons: Sequence[int], seed: int, test_fraction: float = 0.2,
                  folds: int = 5) -> Tuple[List[int], List[int], Dict[int, int]]:
    """Person-level train/test split and train fold assignment, deterministic in ``seed``."""
    uniq = sorted(set(persons))
    if len(uniq) < folds:
        raise ValueError(f"cohort of {len(uniq)} persons is smaller than {folds} folds")
    rng = np.random.default_rng(seed)
    order = [uniq[i] for i in rng.permutation(len(uniq))]
    n_test = int(round(test_fraction * len(uniq)))
    test = sorted(order[:n_test])
    train_order = order[n_test:]
    fold_of = {p: i % folds for i, p in enumerate(train_order)}
    return sorted(train_order), test, dict(sorted(fold_of.items()))


def _fmt_row(values: np.ndarray) -> str:
    # repr of a float never contains "nan" unless it is NaN
    return ",".join(map(repr, values.tolist())).replace("nan", "")


def _export_lines(task: str, persons: Sequence[int], lines: Iterable[str], columns: Sequence[str], out_dir,
                  seed: int, cohort_log: Sequence[Sequence[str]], folds: int) -> Dict[str, str]:
    """Write one task's files from data lines already in (person, stay start) order."""
    out = Path(out_dir) / task
    out.mkdir(parents=True, exist_ok=True)
    header = ["person_id", "stay_index", "stay_start", "label"] + list(columns)
    paths = {}
    with open(out / "cohort_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["person_id", "stay_index", "stay_start", "status", "reason"])
        w.writerows(sorted(cohort_log, key=lambda r: (int(r[0]), int(r[1]))))
    paths["cohort_log"] = str(out / "cohort_log.csv")
    if not persons:
        log.warning("%s: empty cohort", task)
        for name in ("train", "test"):
            (out / f"{name}.csv").write_text(rows_to_text([header]))
        (out / "folds.json").write_text(json.dumps({"seed": seed, "folds": folds, "assignment": {}}) + "\n")
        return paths
    _, test, fold_of = split_persons(persons, seed, folds=folds)
    test_set = {str(p) for p in test}
    with open(out / "train.csv", "w", encoding="utf-8") as tr, open(out / "test.csv", "w", encoding="utf-8") as te:
        tr.write(rows_to_text([header]))
        te.write(rows_to_text([header]))
        for line in lines:
            (te if line[:line.index(",")] in test_set else tr).write(line)
    paths["train"], paths["test"] = str(out / "train.csv"), str(out / "test.csv")
    (out / "folds.json").write_text(json.dumps(
        {"seed": seed, "folds": folds, "test_persons": test,
         "assignment": {str(p): f for p, f in fold_of.items()}}, indent=1) + "\n")
    (out / "columns.json").write_text(json.dumps({"key": header[:4], "features": list(columns)}) + "\n")
    paths["folds"] = str(out / "folds.json")
    return paths


def export_dataset(task: str, rows: Sequence[tuple], columns: Sequence[str], out_dir, seed: int,
                   cohort_log: Sequence[Sequence[str]] = (), folds: int = 5) -> Dict[str, str]:
    """Write train/test CSVs, folds.json, cohort_log.csv and columns.json for one task.

    ``rows`` are (person_id, stay_start, stay_index, label, features) tuples.
    """
    rows = sorted(rows, key=lambda r: (r[0], r[1], r[2]))
    lines = (_row_line(pid, i, start, label, feats) for pid, start, i, label, feats in rows)
    return _export_lines(task, [r[0] for r in rows], lines, columns, out_dir, seed, cohort_log, folds)


def _read_parts(paths: Iterable[str]) -> Iterable[str]:
    for p in paths:
        with open(p, encoding="utf-8") as fh:
            yield from fh


def patient_dirs_with_stays(stage5_dir) -> List[str]:
    """Patient directories that have ICU stays, in person id order."""
    stage5 = Path(stage5_dir)
    ledger = json.loads((stage5 / "extraction_ledger.json").read_text())
    di = ledger["density_index"]
    index = DensityIndex(di["counts"], di["k"], di["threshold"])
    pids = sorted({int(r[0]) for r in iter_rows(stage5 / "icu_stays.csv")})
    return [str(stage5 / "patients" / shard_path(p, index)) for p in pids]


def run_featurize(run_dir, tasks: Dict[str, TaskSpec], sepsis: Sequence[int], seed: int,
                  pool: Optional[Pool] = None, chunk_rows: int = 500_000, batch: int = 200) -> dict:
    if not sepsis:
        raise ConfigError("sepsis concept set is empty")
    run_dir = Path(run_dir)
    pool = pool or Pool(1)
    vocab = select_top_concepts(run_dir / "stage4", QUOTAS, pool, chunk_rows)
    dirs = patient_dirs_with_stays(run_dir / "stage5")
    has_death = find_table_file(run_dir / "stage4", "DEATH") is not None
    if not has_death:
        log.warning("no DEATH table; mortality labels are all 0")
    out_dir = run_dir / "datasets"
    part_dir = run_dir / "tmp" / "featurize"
    jobs = [PatientTaskJob(tuple(dirs[i:i + batch]), tuple(tasks.values()), vocab, frozenset(sepsis), has_death,
                           str(part_dir), i // batch)
            for i in range(0, len(dirs), batch)]
    results = pool.map(featurize_patients, jobs)
    summary = {}
    for task in tasks.values():
        parts = [res["parts"][task.name] for res in results]
        persons = [p for part in parts for p in part["persons"]]
        log_rows = [r for res in results for r in res["log"].get(task.name, [])]
        cols = feature_columns(vocab, task.n_bins)
        # batches follow person id order, so concatenated parts are already sorted
        _export_lines(task.name, persons, _read_parts(p["path"] for p in parts), cols, out_dir, seed, log_rows, 5)
        summary[task.name] = {"rows": len(persons), "positives": sum(p["positives"] for p in parts),
                              "excluded": sum(1 for r in log_rows if r[3] == "excluded"),
                              "bins": task.n_bins, "features": len(cols)}
    shutil.rmtree(part_dir, ignore_errors=True)
    (out_dir / "vocabulary.json").write_text(json.dumps(vocab.to_dict(), indent=1) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary
