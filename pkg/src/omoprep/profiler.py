"""Stage 1: column, table and population statistics.

Profiling is read-only. Per-chunk partials merge associatively, so tables can
be split across workers and the result does not depend on worker count.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
import tempfile
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import pandas as pd

from .ingest import TableChunk, iter_rows, read_header, normalize_header
from .schema import DATE, DATETIME, ICU_CONCEPT_IDS, TableSchema, format_datetime, parse_datetime, parse_int

log = logging.getLogger(__name__)

MISSING_THRESHOLD = 0.95
KMV_K = 2048
_U64 = float(2 ** 64)


@dataclass
class ColumnProfile:
    name: str
    missing_fraction: float
    distinct_estimate: int
    flagged_for_removal: bool


@dataclass
class TableProfile:
    table_name: str
    row_count: int
    unique_patient_count: Optional[int]
    byte_size: int
    estimated_memory_bytes: int
    date_range: Optional[List[str]]  # [min, max] ISO strings, absent if no datetimes
    unparseable_datetimes: int = 0
    malformed_rows: int = 0


@dataclass
class PopulationProfile:
    person_count: int
    icu_admission_rate: float
    mortality_rate: Optional[float]
    gender_distribution: Dict[str, float]
    age_at_first_visit_distribution: Dict[str, float]
    age_summary: Dict[str, float] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)


# ------------------------------------------------------------ distinct sketch

class KMVSketch:
    """K-minimum-values distinct counter; exact below ``k`` distinct values."""

    def __init__(self, k: int = KMV_K):
        self.k = k
        self.hashes = np.empty(0, dtype=np.uint64)

    def add_values(self, values: Sequence[str]) -> None:
        if not values:
            return
        h = pd.util.hash_array(np.asarray(list(values), dtype=object))
        self._absorb(np.unique(h))

    def _absorb(self, h: np.ndarray) -> None:
        merged = np.union1d(self.hashes, h)
        if merged.size > self.k:
            merged = merged[: self.k]
        self.hashes = merged

    def merge(self, other: "KMVSketch") -> "KMVSketch":
        out = KMVSketch(self.k)
        out.hashes = self.hashes
        out._absorb(other.hashes)
        return out

    def estimate(self) -> int:
        n = self.hashes.size
        if n < self.k:
            return int(n)
        kth = float(self.hashes[-1]) / _U64
        return int(round((self.k - 1) / kth))


class DistinctInts:
    """Exact distinct count of integers; spills sorted runs to disk above ``budget``."""

    def __init__(self, budget: int = 5_000_000, tmpdir=None):
        self.budget = budget
        self.tmpdir = tmpdir
        self.current: set = set()
        self.runs: List[Path] = []

    def update(self, values: Iterable[int]) -> None:
        self.current.update(values)
        if len(self.current) > self.budget:
            self._spill()

    def _spill(self) -> None:
        fd, name = tempfile.mkstemp(suffix=".run", dir=self.tmpdir)
        arr = np.array(sorted(self.current), dtype=np.int64)
        with open(fd, "wb") as fh:
            arr.tofile(fh)
        self.runs.append(Path(name))
        self.current = set()

    def count(self) -> int:
        if not self.runs:
            return len(self.current)
        streams = [iter(np.fromfile(p, dtype=np.int64).tolist()) for p in self.runs]
        streams.append(iter(sorted(self.current)))
        n = 0
        last = None
        for v in heapq.merge(*streams):
            if v != last:
                n += 1
                last = v
        for p in self.runs:
            p.unlink(missing_ok=True)
        return n


# ------------------------------------------------------------ chunk partials

def _parse_datetimes(values: Sequence[str]):
    """(min, max, unparseable values) over distinct non-empty timestamp strings."""
    if not values:
        return None, None, []
    bad: List[str] = []
    try:
        arr = np.array(values, dtype="datetime64[s]")
    except ValueError:
        parsed = []
        for v in values:
            try:
                parsed.append(np.datetime64(parse_datetime(v), "s"))
            except ValueError:
                bad.append(v)
        if not parsed:
            return None, None, bad
        arr = np.array(parsed, dtype="datetime64[s]")
    return arr.min(), arr.max(), bad


@dataclass
class TablePartial:
    """Mergeable per-chunk profile state."""

    columns: List[str]
    rows: int = 0
    missing: List[int] = field(default_factory=list)
    chars: int = 0
    sketches: List[KMVSketch] = field(default_factory=list)
    persons: set = field(default_factory=set)
    dt_min: Optional[np.datetime64] = None
    dt_max: Optional[np.datetime64] = None
    unparseable: int = 0
    malformed: int = 0

    def merge(self, other: "TablePartial") -> "TablePartial":
        out = TablePartial(self.columns)
        out.rows = self.rows + other.rows
        out.missing = [a + b for a, b in zip(self.missing, other.missing)] or list(other.missing)
        out.chars = self.chars + other.chars
        if self.sketches and other.sketches:
            out.sketches = [a.merge(b) for a, b in zip(self.sketches, other.sketches)]
        else:
            out.sketches = self.sketches or other.sketches
        out.persons = self.persons | other.persons
        mins = [v for v in (self.dt_min, other.dt_min) if v is not None]
        maxs = [v for v in (self.dt_max, other.dt_max) if v is not None]
        out.dt_min = min(mins) if mins else None
        out.dt_max = max(maxs) if maxs else None
        out.unparseable = self.unparseable + other.unparseable
        out.malformed = self.malformed + other.malformed
        return out


def profile_chunk(chunk: TableChunk) -> TablePartial:
    cols = chunk.columns
    part = TablePartial(list(cols))
    part.rows = len(chunk.rows)
    part.malformed = len(chunk.malformed)
    if not chunk.rows:
        part.missing = [0] * len(cols)
        part.sketches = [KMVSketch() for _ in cols]
        return part
    columns = list(zip(*chunk.rows))
    types = chunk.schema.types
    for name, col in zip(cols, columns):
        distinct = set(col)
        blanks = [v for v in distinct if not v.strip()]
        part.missing.append(sum(col.count(v) for v in blanks))
        distinct.difference_update(blanks)
        part.chars += sum(map(len, col))
        sk = KMVSketch()
        sk.add_values(list(distinct))
        part.sketches.append(sk)
        if types.get(name) in (DATETIME, DATE):
            lo, hi, bad = _parse_datetimes(list(distinct))
            part.unparseable += sum(col.count(v) for v in bad)
            if lo is not None:
                part.dt_min = lo if part.dt_min is None else min(part.dt_min, lo)
                part.dt_max = hi if part.dt_max is None else max(part.dt_max, hi)
    if "person_id" in cols:
        pcol = columns[cols.index("person_id")]
        part.persons = {v for v in (parse_int(x) for x in set(pcol)) if v is not None}
    return part


def _finish(schema: TableSchema, part: TablePartial, byte_size: int,
            threshold: float, warnings: List[str]):
    rows = part.rows
    if rows == 0:
        warnings.append(f"{schema.table_name}: empty table, missingness defaults to 0")
    profiles = []
    for i, name in enumerate(part.columns):
        frac = part.missing[i] / rows if rows else 0.0
        profiles.append(ColumnProfile(name, frac, part.sketches[i].estimate() if part.sketches else 0,
                                      frac > threshold))
    ncols = len(part.columns)
    # CPython: 49 bytes per str header + 8 per list slot + 56 per row list
    mem = part.chars + rows * ncols * 57 + rows * 56
    dr = None
    if part.dt_min is not None:
        dr = [format_datetime(part.dt_min.astype(datetime)), format_datetime(part.dt_max.astype(datetime))]
    tp = TableProfile(schema.table_name, rows,
                      len(part.persons) if schema.patient_linked else None,
                      byte_size, mem, dr, part.unparseable, part.malformed)
    return profiles, tp


def profile_columns(chunks: Iterable[TableChunk], threshold: float = MISSING_THRESHOLD,
                    warnings: Optional[List[str]] = None) -> List[ColumnProfile]:
    """Exact missing fraction per column in one streaming pass; flag iff fraction > threshold."""
    part, schema = _fold(chunks)
    if part is None:
        return []
    cols, _ = _finish(schema, part, 0, threshold, warnings if warnings is not None else [])
    return cols


def profile_table(chunks: Iterable[TableChunk], byte_size: int = 0) -> TableProfile:
    part, schema = _fold(chunks)
    if part is None:
        raise ValueError("no chunks")
    _, tp = _finish(schema, part, byte_size, MISSING_THRESHOLD, [])
    return tp


def _fold(chunks):
    part = None
    schema = None
    for ch in chunks:
        schema = ch.schema
        p = profile_chunk(ch)
        part = p if part is None else part.merge(p)
    return part, schema


def finish_table(schema: TableSchema, part: TablePartial, byte_size: int,
                 threshold: float = MISSING_THRESHOLD) -> dict:
    """Profile document for one table from a fully merged partial."""
    warnings: List[str] = []
    cols, tp = _finish(schema, part, byte_size, threshold, warnings)
    return {
        "table": schema.table_name,
        "table_profile": asdict(tp),
        "columns": [asdict(c) for c in cols],
        "flagged_columns": [c.name for c in cols if c.flagged_for_removal],
        "missing_threshold": threshold,
        "warnings": warnings,
    }


# ---------------------------------------------------------------- population

AGE_BANDS = (("<18", 0, 18), ("18-30", 18, 31), ("31-50", 31, 51), ("51-70", 51, 71), (">70", 71, math.inf))
GENDER_LABELS = {8507: "male", 8532: "female"}


def age_years(birth: datetime, first_visit: datetime) -> float:
    return (first_visit.date() - birth.date()).days / 365.25


def _birth(row: Dict[str, str]) -> Optional[datetime]:
    try:
        b = parse_datetime(row.get("birth_datetime", ""))
    except ValueError:
        b = None
    if b is not None:
        return b
    y = parse_int(row.get("year_of_birth", ""))
    if y is None:
        return None
    m = parse_int(row.get("month_of_birth", "")) or 1
    d = parse_int(row.get("day_of_birth", "")) or 1
    try:
        return datetime(y, m, d)
    except ValueError:
        return datetime(y, 1, 1)


def _paths(p) -> List[Path]:
    """A path, a list of paths (one per site), or None; missing files are dropped."""
    if p is None:
        return []
    items = p if isinstance(p, (list, tuple)) else [p]
    return [Path(x) for x in items if x is not None and Path(x).exists()]


def _iter_dicts(paths):
    for path in _paths(paths):
        header = normalize_header(read_header(path))
        for row in iter_rows(path):
            if len(row) == len(header):
                yield dict(zip(header, row))


def profile_population(person_path, death_path=None, visit_detail_path=None,
                       visit_occurrence_path=None) -> PopulationProfile:
    warnings: List[str] = []
    births: Dict[int, Optional[datetime]] = {}
    genders: Counter = Counter()
    for row in _iter_dicts(person_path):
        pid = parse_int(row.get("person_id", ""))
        if pid is None or pid in births:
            continue
        births[pid] = _birth(row)
        g = parse_int(row.get("gender_concept_id", ""))
        genders[GENDER_LABELS.get(g, "unknown")] += 1
    n = len(births)

    mortality = None
    if _paths(death_path):
        dead = {parse_int(r.get("person_id", "")) for r in _iter_dicts(death_path)}
        mortality = len(dead & births.keys()) / n if n else 0.0
    else:
        warnings.append("DEATH table missing; mortality omitted")

    icu_persons = set()
    first_visit: Dict[int, datetime] = {}
    if _paths(visit_detail_path):
        for r in _iter_dicts(visit_detail_path):
            pid = parse_int(r.get("person_id", ""))
            if parse_int(r.get("visit_detail_concept_id", "")) in ICU_CONCEPT_IDS:
                icu_persons.add(pid)
            if not _paths(visit_occurrence_path):
                _note_first(first_visit, pid, r.get("visit_detail_start_datetime") or r.get("visit_detail_start_date", ""))
    else:
        warnings.append("VISIT_DETAIL table missing; ICU admission rate is 0")
    if _paths(visit_occurrence_path):
        for r in _iter_dicts(visit_occurrence_path):
            _note_first(first_visit, parse_int(r.get("person_id", "")),
                        r.get("visit_start_datetime") or r.get("visit_start_date", ""))

    ages = []
    for pid, b in births.items():
        fv = first_visit.get(pid)
        if b is not None and fv is not None:
            ages.append(age_years(b, fv))
    bands = Counter()
    for a in ages:
        fa = math.floor(a)
        for label, lo, hi in AGE_BANDS:
            if lo <= fa < hi or (label == "<18" and fa < 0):
                bands[label] += 1
                break
    na = len(ages)
    age_dist = {label: (bands[label] / na if na else 0.0) for label, _, _ in AGE_BANDS}
    gender_dist = {k: v / n for k, v in sorted(genders.items())} if n else {}
    summary = {}
    if ages:
        arr = np.asarray(ages)
        summary = {"min": float(arr.min()), "median": float(np.median(arr)), "max": float(arr.max()),
                   "n": na}
    return PopulationProfile(
        person_count=n,
        icu_admission_rate=len(icu_persons & births.keys()) / n if n else 0.0,
        mortality_rate=mortality,
        gender_distribution=gender_dist,
        age_at_first_visit_distribution=age_dist,
        age_summary=summary,
        warnings=warnings,
    )


def _note_first(store: Dict[int, datetime], pid, text: str) -> None:
    if pid is None:
        return
    try:
        t = parse_datetime(text)
    except ValueError:
        return
    if t is not None and (pid not in store or t < store[pid]):
        store[pid] = t


# -------------------------------------------------------------------- export

def export_stats_json(table_docs: Dict[str, dict], population: Optional[PopulationProfile],
                      run_dir) -> Path:
    """Write ``stage1/<TABLE>_profile.json`` per table and ``stage1/population.json``."""
    out = Path(run_dir) / "stage1"
    out.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    for table, doc in sorted(table_docs.items()):
        body = dict(doc)
        body["generated_at"] = stamp
        (out / f"{table}_profile.json").write_text(json.dumps(body, indent=2) + "\n")
    if population is not None:
        body = asdict(population)
        body["generated_at"] = stamp
        (out / "population.json").write_text(json.dumps(body, indent=2) + "\n")
    return out


def load_flagged_columns(run_dir) -> Dict[str, List[str]]:
    """Flagged columns per table, read back from Stage 1 JSON."""
    out = {}
    for p in sorted((Path(run_dir) / "stage1").glob("*_profile.json")):
        doc = json.loads(p.read_text())
        out[doc["table"]] = list(doc.get("flagged_columns", []))
    return out
