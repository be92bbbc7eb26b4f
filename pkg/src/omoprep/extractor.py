"""Stage 5: per-patient directories, ICU stays and phase marks.

Rows are routed to person-hash partitions; each partition is then grouped by
patient and written under a density-adaptive shard path. A prefix with at
least ``threshold`` patients gets an extra layer of 1000-wide id buckets.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from bisect import bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .audit import TableCounts
from .context import StageContext
from .ingest import find_table_file, iter_rows, read_header, rows_to_text
from .parallel import Unit, load_chunk, make_units
from .schema import ICU_CONCEPT_IDS, TABLE_NAMES, format_datetime, get_schema, parse_datetime, parse_int
from .standardizer import EPISODE_MAP, MERGE_WINDOW, VisitInterval, merge_visits

log = logging.getLogger(__name__)

PREFIX_DIGITS = 4
SHARD_THRESHOLD = 30_000
BUCKET_WIDTH = 1000
SUFFIX_DIGITS = 6

PRE_ICU = "pre_icu"
DURING_ICU = "during_icu"
POST_ICU = "post_icu"
NO_ICU = "no_icu"

PHASE_COLUMN = "__phase"
EPISODE_COLUMN = "__episode_id"
STAY_COLUMNS = ["person_id", "stay_index", "stay_start", "stay_end", "icu_concept_id", "visit_detail_ids"]


# --------------------------------------------------------------- sharding

def id_prefix(person_id: int, k: int = PREFIX_DIGITS) -> str:
    """First ``k`` digits of the id, zero-padded on the left when shorter than ``k``."""
    return str(int(person_id)).zfill(k)[:k]


@dataclass
class DensityIndex:
    counts: Dict[str, int]
    k: int = PREFIX_DIGITS
    threshold: int = SHARD_THRESHOLD

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def high_density(self, prefix: str) -> bool:
        return self.counts.get(prefix, 0) >= self.threshold

    def high_prefixes(self) -> List[str]:
        return sorted(p for p, n in self.counts.items() if n >= self.threshold)

    def to_dict(self) -> dict:
        return {"k": self.k, "threshold": self.threshold, "total": self.total,
                "high_density": self.high_prefixes(), "counts": dict(sorted(self.counts.items()))}


def build_density_index(person_ids: Iterable[int], k: int = PREFIX_DIGITS,
                        threshold: int = SHARD_THRESHOLD) -> DensityIndex:
    counts: Counter = Counter()
    for pid in person_ids:
        if pid is None or int(pid) <= 0:
            raise ValueError(f"person ids must be positive, got {pid!r}")
        counts[id_prefix(pid, k)] += 1
    return DensityIndex(dict(counts), k, threshold)


def shard_path(person_id: int, index: DensityIndex) -> str:
    """Relative directory for a patient, with a trailing slash."""
    pid = int(person_id)
    prefix = id_prefix(pid, index.k)
    if not index.high_density(prefix):
        return f"{prefix}/{pid}/"
    lo = (pid % 10 ** SUFFIX_DIGITS) // BUCKET_WIDTH * BUCKET_WIDTH
    hi = lo + BUCKET_WIDTH - 1
    return f"{prefix}/{lo:0{SUFFIX_DIGITS}d}-{hi:0{SUFFIX_DIGITS}d}/{pid}/"


def directory_fanout(paths: Iterable[str]) -> Dict[str, int]:
    """Immediate children per parent directory implied by a set of leaf paths."""
    children: Dict[str, set] = defaultdict(set)
    for p in paths:
        parts = [x for x in p.split("/") if x]
        for depth in range(len(parts)):
            parent = "/".join(parts[:depth])
            children[parent].add(parts[depth])
    return {k: len(v) for k, v in children.items()}


# -------------------------------------------------------------- ICU stays

@dataclass
class IcuStay:
    person_id: int
    start: datetime
    end: datetime
    visit_detail_ids: List[int]
    icu_concept_id: int

    def contains(self, t: datetime) -> bool:
        return self.start <= t <= self.end


def identify_icu_stays(visit_details: Iterable[Tuple[int, int, int, Optional[datetime], Optional[datetime]]],
                       window: timedelta = MERGE_WINDOW) -> Dict[int, List[IcuStay]]:
    """Stays from (person, detail id, concept, start, end) tuples whose concept is an ICU code.

    Fragments within ``window`` of each other are consolidated with the
    visit merge rule; the stay keeps the earliest fragment's concept.
    """
    per: Dict[int, List[VisitInterval]] = defaultdict(list)
    for person, vid, concept, start, end in visit_details:
        if concept in ICU_CONCEPT_IDS and start is not None:
            per[person].append(VisitInterval(vid, start, end, concept))
    out: Dict[int, List[IcuStay]] = {}
    for person in sorted(per):
        episodes, _ = merge_visits(person, per[person], window)
        out[person] = [IcuStay(person, e.start, e.end, list(e.constituents), e.care_setting) for e in episodes]
    return out


def phase_of(t: Optional[datetime], stays: Sequence[IcuStay]) -> str:
    """Closed-interval membership decides during_icu; between stays counts as post_icu."""
    if not stays:
        return NO_ICU
    if t is None:
        return ""
    for s in stays:
        if s.start <= t <= s.end:
            return DURING_ICU
    if t < stays[0].start:
        return PRE_ICU
    return POST_ICU


def mark_phases(times: Sequence[Optional[datetime]], stays: Sequence[IcuStay]) -> List[str]:
    stays = sorted(stays, key=lambda s: s.start)
    return [phase_of(t, stays) for t in times]


@dataclass
class PatientBundle:
    person_id: int
    tables: Dict[str, List[List[str]]] = field(default_factory=dict)
    columns: Dict[str, List[str]] = field(default_factory=dict)
    stays: List[IcuStay] = field(default_factory=list)


# ------------------------------------------------------------ parallel runner

@dataclass(frozen=True)
class RouteJob:
    unit: Unit
    tmp: str
    partitions: int


def _partition(person: str, partitions: int) -> int:
    return zlib.crc32(person.strip().encode()) % partitions


def route_unit(job: RouteJob) -> dict:
    """Append this unit's rows, prefixed by global position, to per-partition files."""
    unit = job.unit
    chunk = load_chunk(unit)
    pi = chunk.columns.index("person_id")
    buckets: Dict[int, List[List[str]]] = defaultdict(list)
    for i, row in enumerate(chunk.rows):
        buckets[_partition(row[pi], job.partitions)].append([str(unit.pos_base + chunk.index_of(i))] + row)
    out = {}
    for part, rows in sorted(buckets.items()):
        d = Path(job.tmp) / f"p{part:04d}"
        d.mkdir(parents=True, exist_ok=True)
        p = d / f"{unit.table}.u{unit.seq:06d}"
        p.write_text(rows_to_text(rows), encoding="utf-8")
        out[part] = str(p)
    return {"rows": len(chunk.rows), "files": out}


@dataclass(frozen=True)
class PatientJob:
    part: int
    files: Dict[str, Tuple[str, ...]]  # table -> unit files in unit order
    columns: Dict[str, Tuple[str, ...]]
    out_root: str
    tmp: str
    index: DensityIndex
    episode_map: Dict[int, int]
    window_s: float


def _time_index(table: str, columns: Sequence[str]) -> Tuple[Optional[int], Optional[int]]:
    s = get_schema(table)
    cols = list(columns)
    return (cols.index(s.start_column) if s.start_column in cols else None,
            cols.index(s.start_date_column) if s.start_date_column in cols else None)


def _row_time(row, dt_i, d_i) -> Optional[datetime]:
    for i in (dt_i, d_i):
        if i is not None and row[i].strip():
            try:
                return parse_datetime(row[i])
            except ValueError:
                return None
    return None


def extract_partition(job: PatientJob) -> dict:
    """Group one partition's rows by patient and write their directories."""
    rows_by_table: Dict[str, List[List[str]]] = {}
    for table, files in job.files.items():
        rows: List[List[str]] = []
        for f in files:
            rows.extend(iter_rows_nohdr(f))
            Path(f).unlink(missing_ok=True)
        rows_by_table[table] = rows
    persons = set()
    for r in rows_by_table.get("PERSON", []):
        p = parse_int(r[1 + job.columns["PERSON"].index("person_id")])
        if p is not None:
            persons.add(p)
    # ICU stays from this partition's VISIT_DETAIL rows
    details = []
    if "VISIT_DETAIL" in rows_by_table:
        cols = job.columns["VISIT_DETAIL"]
        vi, pi, ci = cols.index("visit_detail_id"), cols.index("person_id"), cols.index("visit_detail_concept_id")
        si = _time_index("VISIT_DETAIL", cols)
        s = get_schema("VISIT_DETAIL")
        ei = (cols.index(s.end_column) if s.end_column in cols else None,
              cols.index(s.end_date_column) if s.end_date_column in cols else None)
        for r in rows_by_table["VISIT_DETAIL"]:
            f = r[1:]
            details.append((parse_int(f[pi]), parse_int(f[vi]), parse_int(f[ci]),
                            _row_time(f, *si), _row_time(f, *ei)))
    stays = identify_icu_stays(details, timedelta(seconds=job.window_s))
    # group rows by patient
    per_patient: Dict[int, Dict[str, list]] = defaultdict(lambda: defaultdict(list))
    orphans: Dict[str, list] = defaultdict(list)
    counts: Dict[str, Counter] = defaultdict(Counter)
    for table, rows in rows_by_table.items():
        cols = job.columns[table]
        pi = cols.index("person_id")
        ti = _time_index(table, cols)
        vo = cols.index("visit_occurrence_id") if "visit_occurrence_id" in cols else None
        for r in rows:
            pos, f = int(r[0]), r[1:]
            pid = parse_int(f[pi])
            if pid is None or pid not in persons:
                orphans[table].append([pos] + f)
                counts[table]["orphans"] += 1
                continue
            per_patient[pid][table].append((_row_time(f, *ti), pos, f, vo))
            counts[table]["patients"] += 1
    root = Path(job.out_root)
    written = 0
    for pid in sorted(per_patient):
        rel = shard_path(pid, job.index)
        d = root / rel
        d.mkdir(parents=True, exist_ok=True)
        p_stays = stays.get(pid, [])
        for table, items in sorted(per_patient[pid].items()):
            items.sort(key=lambda x: (x[0] is None, x[0] or datetime.min, x[1]))
            out = []
            for t, _, f, vo in items:
                ep = ""
                if vo is not None and f[vo].strip():
                    v = parse_int(f[vo])
                    ep = str(job.episode_map.get(v, v)) if v is not None else ""
                out.append(f + [phase_of(t, p_stays), ep])
            with open(d / f"{table}.csv", "w", newline="", encoding="utf-8") as fh:
                fh.write(rows_to_text([list(job.columns[table]) + [PHASE_COLUMN, EPISODE_COLUMN]] + out))
        if p_stays:
            with open(d / "icu_stays.csv", "w", newline="", encoding="utf-8") as fh:
                fh.write(rows_to_text([STAY_COLUMNS] + _stay_rows(pid, p_stays)))
        written += 1
    stay_rows = [r for pid in sorted(stays) if pid in persons for r in _stay_rows(pid, stays[pid])]
    return {"patients": written, "counts": {t: dict(c) for t, c in counts.items()},
            "orphans": {t: rows for t, rows in orphans.items()}, "stays": stay_rows,
            "orphan_stays": sum(1 for pid in stays if pid not in persons)}


def _stay_rows(pid: int, stays: Sequence[IcuStay]) -> List[List[str]]:
    return [[str(pid), str(i), format_datetime(s.start), format_datetime(s.end), str(s.icu_concept_id),
             ";".join(str(v) for v in s.visit_detail_ids)] for i, s in enumerate(stays)]


def iter_rows_nohdr(path) -> Iterable[List[str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if row:
                yield row


def load_episode_map(path) -> Dict[int, int]:
    out = {}
    p = Path(path)
    if not p.exists():
        return out
    with open(p, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            if row["table"] == "VISIT_OCCURRENCE":
                v, e = parse_int(row["visit_id"]), parse_int(row["episode_id"])
                if v is not None and e is not None:
                    out[v] = e
    return out


def person_ids(path, delimiter: str = ",") -> List[int]:
    header = [c.strip().lower() for c in read_header(path, delimiter)]
    pi = header.index("person_id")
    out = []
    for row in iter_rows(path, delimiter):
        v = parse_int(row[pi])
        if v is not None:
            out.append(v)
    return out


def run_stage5(ctx: StageContext, threshold: int = SHARD_THRESHOLD, k: int = PREFIX_DIGITS,
               window: timedelta = MERGE_WINDOW) -> dict:
    out = ctx.out_dir
    out.mkdir(parents=True, exist_ok=True)
    person_file = find_table_file(ctx.previous_dir(), "PERSON")
    if person_file is None:
        raise FileNotFoundError("stage 5 needs the PERSON table from stage 4")
    index = build_density_index(sorted(set(person_ids(person_file, ctx.delimiter))), k, threshold)
    episode_map = load_episode_map(ctx.previous_dir() / EPISODE_MAP)
    tables = [t for t in TABLE_NAMES if get_schema(t).patient_linked and ctx.sources(t)]
    all_units = {t: make_units(ctx.sources(t), ctx.chunk_rows, ctx.delimiter) for t in tables}
    total_rows = sum(u.span.n_rows for us in all_units.values() for u in us)
    parts_n = max(ctx.pool.workers, math.ceil(total_rows / max(1, ctx.chunk_rows)), 1)
    tmp = ctx.tmp_dir
    routed = {}
    columns = {}
    for t in tables:
        columns[t] = tuple(read_header_lower(ctx.sources(t)[0].path, ctx.delimiter))
        routed[t] = ctx.pool.map(route_unit, [RouteJob(u, str(tmp), parts_n) for u in all_units[t]])
    jobs = []
    for p in range(parts_n):
        files = {t: tuple(r["files"][p] for r in routed[t] if p in r["files"]) for t in tables}
        files = {t: f for t, f in files.items() if f}
        if files:
            jobs.append(PatientJob(p, files, {t: columns[t] for t in files}, str(out / "patients"), str(tmp),
                                   index, episode_map, window.total_seconds()))
    results = ctx.pool.map(extract_partition, jobs)
    # orphans and the global stay list, in a partition-independent order
    orphan_counts: Counter = Counter()
    orphan_rows: Dict[str, list] = defaultdict(list)
    stays: List[List[str]] = []
    per_table: Dict[str, Counter] = defaultdict(Counter)
    patients = 0
    for r in results:
        patients += r["patients"]
        stays.extend(r["stays"])
        for t, c in r["counts"].items():
            per_table[t].update(c)
        for t, rows in r["orphans"].items():
            orphan_rows[t].extend(rows)
    for t, rows in sorted(orphan_rows.items()):
        rows.sort(key=lambda x: x[0])
        d = out / "orphans"
        d.mkdir(parents=True, exist_ok=True)
        with open(d / f"{t}.csv", "w", newline="", encoding="utf-8") as fh:
            fh.write(rows_to_text([list(columns[t]) + ["__reason"]] +
                                  [r[1:] + ["person_not_in_PERSON"] for r in rows]))
        orphan_counts[t] = len(rows)
    stays.sort(key=lambda r: (int(r[0]), int(r[1])))
    with open(out / "icu_stays.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(rows_to_text([STAY_COLUMNS] + stays))
    ledger_tables = {}
    for t in tables:
        rows_in = sum(r["rows"] for r in routed[t])
        n_pat = per_table[t].get("patients", 0)
        n_orph = per_table[t].get("orphans", 0)
        ledger_tables[t] = {"rows_in": rows_in, "patient_rows": n_pat, "orphan_rows": n_orph,
                            "conserved": rows_in == n_pat + n_orph}
        ctx.ledger.merge_counts(ctx.stage, t, TableCounts(rows_in=rows_in, rows_out=n_pat + n_orph))
    doc = {"patients": patients, "icu_stays": len(stays), "density_index": index.to_dict(),
           "tables": ledger_tables, "orphans": dict(sorted(orphan_counts.items())),
           "shard_rule": {"prefix_digits": k, "threshold": threshold, "bucket_width": BUCKET_WIDTH}}
    (out / "extraction_ledger.json").write_text(json.dumps(doc, indent=2) + "\n")
    ctx.cleanup_tmp()
    return {"patients": patients, "icu_stays": len(stays), "orphan_rows": sum(orphan_counts.values())}


def read_header_lower(path, delimiter=",") -> List[str]:
    return [c.strip().lower() for c in read_header(path, delimiter)]


def load_bundle(patient_dir) -> PatientBundle:
    """Read a patient directory back into a PatientBundle."""
    d = Path(patient_dir)
    pid = int(d.name)
    b = PatientBundle(pid)
    for f in sorted(d.glob("*.csv")):
        if f.name == "icu_stays.csv":
            for row in iter_rows(f):
                b.stays.append(IcuStay(int(row[0]), parse_datetime(row[2]), parse_datetime(row[3]),
                                       [int(x) for x in row[5].split(";") if x], int(row[4])))
            continue
        b.columns[f.stem] = read_header(f)
        b.tables[f.stem] = list(iter_rows(f))
    return b
