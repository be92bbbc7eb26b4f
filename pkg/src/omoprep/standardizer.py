"""Stage 4: unit conversion, plausibility bounds, percentile outlier filter,
visit consolidation and type normalization, applied in that order.

Conversion and outlier filtering touch MEASUREMENT only. Visit merging runs
on VISIT_OCCURRENCE and VISIT_DETAIL. Every table is type-normalized.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from . import audit as A
from .audit import AuditEntry, TableCounts
from .context import StageContext, copy_passthrough
from .ingest import TableChunk, concat_parts, rows_to_text
from .parallel import PartFiles, Unit, load_chunk, make_units
from .schema import (CONCEPT, DATE, DATETIME, ID, NUMERIC, PASSTHROUGH_TABLES, TABLE_NAMES, TEXT,
                     VISIT_TABLES, canonical_field, format_date, format_datetime, format_float,
                     get_schema, parse_datetime, parse_float, parse_int)
from .tdigest import TDigest

log = logging.getLogger(__name__)

ORIG_VALUE = "__orig_value"
ORIG_UNIT = "__orig_unit"
EPISODE_MAP = "visit_episode_map.csv"
MERGE_WINDOW = timedelta(hours=2)


# ------------------------------------------------------------------ units

@dataclass(frozen=True)
class UnitRule:
    scope: Optional[frozenset]  # None means any concept
    source_unit: str
    a: float
    b: float
    target_unit: str
    lo: Optional[float] = None
    hi: Optional[float] = None
    target_unit_concept_id: Optional[int] = None

    def __post_init__(self):
        if self.a == 0:
            raise ValueError("unit rule scale must be non-zero")
        if self.lo is not None and self.hi is not None and not self.lo < self.hi:
            raise ValueError(f"unit rule bounds need lo < hi, got [{self.lo}, {self.hi}]")

    def applies_to(self, concept: Optional[int]) -> bool:
        return self.scope is None or concept in self.scope

    @property
    def bounded(self) -> bool:
        return self.lo is not None or self.hi is not None


def _number(text: str) -> Optional[float]:
    text = text.strip()
    if not text:
        return None
    return float(Fraction(text))


def _scope(text: str) -> Optional[frozenset]:
    text = text.strip()
    if text.lower() in ("", "any", "*"):
        return None
    return frozenset(int(x) for x in re.split(r"[;| ]+", text) if x)


def load_ucum_synonyms(path=None) -> Dict[str, str]:
    """Lower-cased label -> UCUM code. Defaults to the packaged table."""
    if path is None:
        text = resources.files("omoprep.data").joinpath("ucum_synonyms.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    out = {}
    for row in csv.DictReader(text.splitlines()):
        out[row["label"].strip().lower()] = row["ucum"].strip()
    return out


def normalize_unit(label: Optional[str], synonyms: Dict[str, str]) -> Optional[str]:
    if label is None:
        return None
    label = label.strip()
    if not label:
        return None
    return synonyms.get(label.lower(), label)


def load_unit_rules(path=None, synonyms: Optional[Dict[str, str]] = None) -> List[UnitRule]:
    if path is None:
        text = resources.files("omoprep.data").joinpath("unit_rules.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    synonyms = synonyms if synonyms is not None else load_ucum_synonyms()
    rules = []
    for row in csv.DictReader(text.splitlines()):
        rules.append(UnitRule(
            scope=_scope(row.get("scope", "")),
            source_unit=normalize_unit(row["source_unit"], synonyms),
            a=_number(row["a"]),
            b=_number(row.get("b", "") or "0") or 0.0,
            target_unit=normalize_unit(row["target_unit"], synonyms),
            lo=_number(row.get("lo", "") or ""),
            hi=_number(row.get("hi", "") or ""),
            target_unit_concept_id=parse_int(row.get("target_unit_concept_id", "") or ""),
        ))
    return rules


class UnitRuleSet:
    def __init__(self, rules: Sequence[UnitRule], synonyms: Optional[Dict[str, str]] = None):
        self.rules = list(rules)
        self.synonyms = synonyms if synonyms is not None else load_ucum_synonyms()

    def conversion(self, concept: Optional[int], unit: Optional[str]) -> Optional[UnitRule]:
        u = normalize_unit(unit, self.synonyms)
        if u is None:
            return None
        for r in self.rules:
            if r.source_unit == u and r.target_unit != u and r.applies_to(concept):
                return r
        return None

    def bounds(self, concept: Optional[int], unit: Optional[str]) -> Optional[UnitRule]:
        u = normalize_unit(unit, self.synonyms)
        if u is None:
            return None
        for r in self.rules:
            if r.target_unit == u and r.bounded and r.applies_to(concept):
                return r
        return None


def convert_unit(value: float, rule: UnitRule) -> Tuple[float, str]:
    """(a*value + b, target unit)."""
    return rule.a * value + rule.b, rule.target_unit


def apply_plausibility(value: float, rule: UnitRule) -> Optional[str]:
    """None to keep; otherwise the violated bound. Bounds are closed."""
    if rule.lo is not None and value < rule.lo:
        return f"below_lo:{rule.lo:g}"
    if rule.hi is not None and value > rule.hi:
        return f"above_hi:{rule.hi:g}"
    return None


class MeasurementUnits:
    """Row-level conversion and plausibility over MEASUREMENT rows."""

    def __init__(self, columns: Sequence[str], rules: UnitRuleSet):
        self.rules = rules
        cols = list(columns)
        self.in_columns = cols
        self.out_columns = cols + [c for c in (ORIG_VALUE, ORIG_UNIT) if c not in cols]
        self.ci = cols.index("measurement_concept_id")
        self.vi = cols.index("value_as_number") if "value_as_number" in cols else None
        self.ui = cols.index("unit_source_value") if "unit_source_value" in cols else None
        self.uci = cols.index("unit_concept_id") if "unit_concept_id" in cols else None
        self.ov = self.out_columns.index(ORIG_VALUE)
        self.ou = self.out_columns.index(ORIG_UNIT)
        self.pad = len(self.out_columns) - len(cols)

    def apply(self, row: Sequence[str]):
        """(row out, converted?, implausible reason or None)."""
        out = list(row) + [""] * self.pad if self.pad else list(row)
        if self.vi is None or self.ui is None:
            return out, False, None
        value = parse_float(row[self.vi])
        if value is None:
            return out, False, None
        concept = parse_int(row[self.ci])
        unit = row[self.ui]
        converted = False
        rule = self.rules.conversion(concept, unit)
        if rule is not None:
            new, target = convert_unit(value, rule)
            if not out[self.ov] and not out[self.ou]:
                out[self.ov] = row[self.vi]
                out[self.ou] = unit
            out[self.vi] = format_float(new)
            out[self.ui] = target
            if self.uci is not None and rule.target_unit_concept_id is not None:
                out[self.uci] = str(rule.target_unit_concept_id)
            value, unit, converted = new, target, True
        bound = self.rules.bounds(concept, unit)
        if bound is not None:
            why = apply_plausibility(value, bound)
            if why is not None:
                return out, converted, why
        return out, converted, None


# --------------------------------------------------------------- outliers

@dataclass
class Cutoff:
    n: int
    lo: float
    hi: float

    def to_dict(self):
        return {"n": self.n, "lo": self.lo, "hi": self.hi}


def build_digests(pairs: Iterable[Tuple[int, float]], delta: float = 100.0) -> Dict[int, TDigest]:
    """Per-concept digests from (concept, value) pairs."""
    values: Dict[int, List[float]] = defaultdict(list)
    for c, v in pairs:
        values[c].append(v)
    out = {}
    for c, vs in values.items():
        out[c] = TDigest(delta).update(vs)
    return out


def merge_digest_maps(maps: Iterable[Dict[int, TDigest]]) -> Dict[int, TDigest]:
    out: Dict[int, TDigest] = {}
    for m in maps:
        for c, d in m.items():
            out[c] = d.copy() if c not in out else out[c].merge(d)
    return out


def compute_cutoffs(digests: Dict[int, TDigest], q_lo: float = 0.01, q_hi: float = 0.99,
                    n_min: int = 100) -> Dict[int, Cutoff]:
    """Cutoffs for concepts with at least ``n_min`` values; smaller concepts are exempt."""
    if not 0.0 <= q_lo < q_hi <= 1.0:
        raise ValueError("need 0 <= q_lo < q_hi <= 1")
    out = {}
    for c in sorted(digests):
        d = digests[c]
        n = int(d.total_weight)
        if n >= n_min:
            out[c] = Cutoff(n, d.quantile(q_lo), d.quantile(q_hi))
    return out


def outlier_reason(value: Optional[float], cutoff: Optional[Cutoff]) -> Optional[str]:
    """Strictly below the low cutoff or strictly above the high one."""
    if value is None or cutoff is None:
        return None
    if value < cutoff.lo:
        return f"below_q_lo:{cutoff.lo!r}"
    if value > cutoff.hi:
        return f"above_q_hi:{cutoff.hi!r}"
    return None


def filter_outliers(chunk: TableChunk, cutoffs: Dict[int, Cutoff]) -> Tuple[TableChunk, List[AuditEntry]]:
    cols = chunk.columns
    ci = cols.index(chunk.schema.primary_concept_column)
    vi = cols.index("value_as_number")
    pi = cols.index("person_id")
    keep, removed = [], []
    for i, row in enumerate(chunk.rows):
        why = outlier_reason(parse_float(row[vi]), cutoffs.get(parse_int(row[ci])))
        if why is None:
            keep.append(i)
        else:
            removed.append(AuditEntry(A.OUTLIER, chunk.schema.table_name, chunk.source_file,
                                      chunk.index_of(i), parse_int(row[pi]), why, list(row)))
    kept = TableChunk(chunk.schema, cols, [chunk.rows[i] for i in keep], chunk.chunk_index,
                      chunk.byte_range, chunk.first_row, chunk.source_file, [],
                      [chunk.index_of(i) for i in keep])
    return kept, removed


def load_cutoffs(path) -> Dict[int, Cutoff]:
    doc = json.loads(Path(path).read_text())
    return {int(c): Cutoff(v["n"], v["lo"], v["hi"]) for c, v in doc["cutoffs"].items()}


# ------------------------------------------------------------ visit merge

@dataclass
class VisitEpisode:
    person_id: int
    start: datetime
    end: datetime
    constituents: List[int]  # visit ids, time sorted
    care_setting: Optional[int] = None

    @property
    def episode_id(self) -> int:
        return self.constituents[0]


@dataclass(frozen=True)
class VisitInterval:
    visit_id: int
    start: Optional[datetime]
    end: Optional[datetime]
    concept: Optional[int] = None


def merge_visits(person_id: int, visits: Sequence[VisitInterval],
                 window: timedelta = MERGE_WINDOW) -> Tuple[List[VisitEpisode], List[VisitInterval]]:
    """Greedy merge of one person's visits; returns (episodes, visits lacking a start).

    Sorted by (start, end, id); a visit joins the open episode iff its start is
    at most ``window`` after the episode end. Episode end is the max end seen.
    """
    dated = [v for v in visits if v.start is not None]
    undated = [v for v in visits if v.start is None]
    dated.sort(key=lambda v: (v.start, v.end or v.start, v.visit_id))
    episodes: List[VisitEpisode] = []
    cur: Optional[VisitEpisode] = None
    for v in dated:
        end = max(v.end, v.start) if v.end is not None else v.start
        if cur is not None and v.start <= cur.end + window:
            cur.constituents.append(v.visit_id)
            if end > cur.end:
                cur.end = end
        else:
            cur = VisitEpisode(person_id, v.start, end, [v.visit_id], v.concept)
            episodes.append(cur)
    return episodes, undated


@dataclass(frozen=True)
class VisitColumns:
    vid: int
    pid: int
    concept: int
    start: Optional[int]
    start_date: Optional[int]
    end: Optional[int]
    end_date: Optional[int]

    @classmethod
    def of(cls, table: str, columns: Sequence[str]) -> "VisitColumns":
        s = get_schema(table)
        cols = list(columns)

        def ix(name):
            return cols.index(name) if name and name in cols else None

        return cls(cols.index(s.id_column), cols.index("person_id"), cols.index(s.primary_concept_column),
                   ix(s.start_column), ix(s.start_date_column), ix(s.end_column), ix(s.end_date_column))

    def times(self, row) -> Tuple[Optional[datetime], Optional[datetime]]:
        def pick(a, b):
            for i in (a, b):
                if i is not None and row[i].strip():
                    try:
                        return parse_datetime(row[i])
                    except ValueError:
                        return None
            return None

        return pick(self.start, self.start_date), pick(self.end, self.end_date)


def _person_partition(person: str, partitions: int) -> int:
    return zlib.crc32(person.encode()) % partitions


# ------------------------------------------------------- type normalization

_ISO_DT = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}\Z")
_ISO_D = re.compile(r"\d{4}-\d{2}-\d{2}\Z")


def _norm_id(text: str) -> str:
    if text.isdigit() and (text[0] != "0" or len(text) == 1):
        return text
    return canonical_field(ID, text)


def _norm_num(text: str) -> str:
    if not text:
        return ""
    try:
        v = float(text)
    except ValueError:
        return text
    return "" if v != v else repr(v)


def _norm_dt(text: str) -> str:
    if _ISO_DT.match(text):
        return text
    return canonical_field(DATETIME, text)


def _norm_date(text: str) -> str:
    if _ISO_D.match(text):
        return text
    return canonical_field(DATE, text)


def _norm_text(text: str) -> str:
    return text


_NORMALIZERS: Dict[str, Callable[[str], str]] = {
    ID: _norm_id, CONCEPT: _norm_id, NUMERIC: _norm_num, DATETIME: _norm_dt, DATE: _norm_date,
    TEXT: _norm_text,
}
_EXTRA_TYPES = {"__source_concept_id": CONCEPT, ORIG_VALUE: TEXT, ORIG_UNIT: TEXT}


def row_normalizer(table: str, columns: Sequence[str]) -> Callable[[Sequence[str]], List[str]]:
    types = get_schema(table).types
    fns = [_NORMALIZERS[types.get(c, _EXTRA_TYPES.get(c, TEXT))] for c in columns]
    pairs = list(enumerate(fns))
    if all(f is _norm_text for f in fns):
        return list

    def norm(row):
        return [f(row[i]) for i, f in pairs]

    return norm


def normalize_types(chunk: TableChunk) -> TableChunk:
    """IDs as integers, numerics as floats, ISO datetimes; missing stays empty."""
    norm = row_normalizer(chunk.schema.table_name, chunk.columns)
    return TableChunk(chunk.schema, chunk.columns, [norm(r) for r in chunk.rows], chunk.chunk_index,
                      chunk.byte_range, chunk.first_row, chunk.source_file, chunk.malformed,
                      chunk.row_indices)


# ------------------------------------------------------------ parallel runner

@dataclass(frozen=True)
class StdJob:
    unit: Unit
    tmp: str
    with_site: bool
    rules: Optional[UnitRuleSet] = None
    delta: float = 100.0
    cutoffs: Optional[Dict[int, Cutoff]] = None
    partitions: int = 1
    decisions: Optional[dict] = None


def _write_out(tmp: str, seq: int, rows) -> str:
    p = Path(tmp) / "out" / f"{seq:06d}.part"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(rows_to_text(rows), encoding="utf-8")
    return str(p)


def _audit(unit: Unit, ri: int, row, cat: str, reason: str, with_site: bool, action=A.REMOVED):
    return AuditEntry(cat, unit.table, unit.source_label, ri, None, reason, list(row), action,
                      unit.site_id).to_row(with_site)


def measurement_pass1(job: StdJob) -> dict:
    """Convert units, apply bounds, build per-concept digests on the kept values."""
    unit = job.unit
    chunk = load_chunk(unit)
    mu = MeasurementUnits(chunk.columns, job.rules)
    parts = PartFiles(Path(job.tmp) / "audit", unit.seq)
    values: Dict[int, List[float]] = defaultdict(list)
    n_conv = n_impl = 0
    vi = mu.vi
    for i, row in enumerate(chunk.rows):
        ri = chunk.index_of(i)
        out, converted, why = mu.apply(row)
        if converted:
            n_conv += 1
            parts.add(A.UNIT_CONVERTED, _audit(unit, ri, row, A.UNIT_CONVERTED,
                                               f"{out[mu.ou]}->{out[mu.ui]}", job.with_site, A.REWRITTEN))
        if why is not None:
            n_impl += 1
            parts.add(A.IMPLAUSIBLE, _audit(unit, ri, row, A.IMPLAUSIBLE, why, job.with_site))
            continue
        if vi is not None:
            v = parse_float(out[vi])
            c = parse_int(out[mu.ci])
            if v is not None and c is not None:
                values[c].append(v)
    digests = {c: TDigest(job.delta).update(vs) for c, vs in values.items()}
    return {"rows_in": len(chunk.rows), "converted": n_conv, "implausible": n_impl,
            "digests": digests, "audit": parts.close(), "columns": mu.out_columns}


def measurement_pass2(job: StdJob) -> dict:
    unit = job.unit
    chunk = load_chunk(unit)
    mu = MeasurementUnits(chunk.columns, job.rules)
    norm = row_normalizer(unit.table, mu.out_columns)
    parts = PartFiles(Path(job.tmp) / "audit2", unit.seq)
    cutoffs = job.cutoffs or {}
    out_rows = []
    removed: Dict[int, int] = defaultdict(int)
    for i, row in enumerate(chunk.rows):
        out, _, why = mu.apply(row)
        if why is not None:
            continue
        c = parse_int(out[mu.ci])
        reason = outlier_reason(parse_float(out[mu.vi]) if mu.vi is not None else None, cutoffs.get(c))
        if reason is not None:
            removed[c] += 1
            parts.add(A.OUTLIER, _audit(unit, chunk.index_of(i), row, A.OUTLIER, reason, job.with_site))
            continue
        out_rows.append(norm(out))
    return {"rows_out": len(out_rows), "outliers": dict(removed), "out": _write_out(job.tmp, unit.seq, out_rows),
            "audit": parts.close()}


def visit_pass1(job: StdJob) -> dict:
    """Emit (position, person, concept, id, start, end) lines per person partition."""
    unit = job.unit
    chunk = load_chunk(unit)
    vc = VisitColumns.of(unit.table, chunk.columns)
    lines: Dict[int, List[str]] = defaultdict(list)
    for i, row in enumerate(chunk.rows):
        pos = unit.pos_base + chunk.index_of(i)
        start, end = vc.times(row)
        person = row[vc.pid].strip()
        lines[_person_partition(person, job.partitions)].append(
            f"{pos}\t{person}\t{row[vc.concept].strip()}\t{row[vc.vid].strip()}\t"
            f"{format_datetime(start)}\t{format_datetime(end)}\n")
    out = {}
    d = Path(job.tmp) / "visits"
    d.mkdir(parents=True, exist_ok=True)
    for part, ls in sorted(lines.items()):
        p = d / f"v.p{part:04d}.u{unit.seq:06d}"
        p.write_text("".join(ls), encoding="utf-8")
        out[part] = str(p)
    return {"rows_in": len(chunk.rows), "keys": out}


def visit_partition(args) -> Tuple[dict, List[tuple], int]:
    """Merge every (person, care setting) group found in one partition's files.

    Returns ({position: decision}, episode map rows, undated count). A decision
    is ("head", end iso, n constituents, episode id) or ("absorbed", episode id).
    """
    files, window_s = args
    window = timedelta(seconds=window_s)
    groups: Dict[tuple, List[Tuple[int, VisitInterval]]] = defaultdict(list)
    for f in files:
        with open(f, encoding="utf-8") as fh:
            for line in fh:
                pos, person, concept, vid, s, e = line.rstrip("\n").split("\t")
                iv = VisitInterval(int(vid) if vid.lstrip("-").isdigit() else -int(pos),
                                   datetime.fromisoformat(s) if s else None,
                                   datetime.fromisoformat(e) if e else None,
                                   parse_int(concept))
                groups[(person, concept)].append((int(pos), iv))
        Path(f).unlink(missing_ok=True)
    decisions: dict = {}
    mapping: List[tuple] = []
    undated = 0
    for (person, concept), members in sorted(groups.items()):
        pos_of = {}
        for pos, iv in members:
            # a repeated visit id within one group keeps its first position
            pos_of.setdefault(iv.visit_id, pos)
        episodes, skipped = merge_visits(parse_int(person) or 0, [iv for _, iv in members], window)
        undated += len(skipped)
        by_id = {iv.visit_id: iv for _, iv in members}
        for ep in episodes:
            if len(ep.constituents) == 1:
                continue
            head = ep.constituents[0]
            head_end = by_id[head].end
            if head_end is None or ep.end != head_end:
                decisions[pos_of[head]] = ("head", format_datetime(ep.end), len(ep.constituents), head)
            for vid in ep.constituents:
                mapping.append((person, vid, head, format_datetime(ep.start), format_datetime(ep.end)))
                if vid != head:
                    decisions[pos_of[vid]] = ("absorbed", head)
    return decisions, mapping, undated


def visit_pass2(job: StdJob) -> dict:
    unit = job.unit
    chunk = load_chunk(unit)
    vc = VisitColumns.of(unit.table, chunk.columns)
    norm = row_normalizer(unit.table, chunk.columns)
    parts = PartFiles(Path(job.tmp) / "audit2", unit.seq)
    dec = job.decisions or {}
    out_rows = []
    absorbed = rewritten = 0
    for i, row in enumerate(chunk.rows):
        ri = chunk.index_of(i)
        d = dec.get(ri)
        if d is None:
            out_rows.append(norm(row))
            continue
        if d[0] == "absorbed":
            absorbed += 1
            parts.add(A.VISIT_MERGED, _audit(unit, ri, row, A.VISIT_MERGED, f"merged_into:{d[1]}",
                                             job.with_site))
            continue
        rewritten += 1
        parts.add(A.VISIT_MERGED, _audit(unit, ri, row, A.VISIT_MERGED,
                                         f"episode_end:{d[1]}:constituents:{d[2]}", job.with_site,
                                         A.REWRITTEN))
        new = list(row)
        end = datetime.fromisoformat(d[1])
        if vc.end is not None:
            new[vc.end] = format_datetime(end)
        if vc.end_date is not None:
            new[vc.end_date] = format_date(end)
        out_rows.append(norm(new))
    return {"rows_out": len(out_rows), "absorbed": absorbed, "rewritten": rewritten,
            "out": _write_out(job.tmp, unit.seq, out_rows), "audit": parts.close()}


def normalize_pass(job: StdJob) -> dict:
    unit = job.unit
    chunk = load_chunk(unit)
    norm = row_normalizer(unit.table, chunk.columns)
    rows = [norm(r) for r in chunk.rows]
    return {"rows_in": len(rows), "rows_out": len(rows), "out": _write_out(job.tmp, unit.seq, rows)}


@dataclass
class Stage4Options:
    rules: UnitRuleSet
    delta: float = 100.0
    q_lo: float = 0.01
    q_hi: float = 0.99
    n_min: int = 100
    window: timedelta = MERGE_WINDOW
    frozen_cutoffs: Optional[Dict[int, Cutoff]] = None


def _standardize_measurement(ctx: StageContext, opts: Stage4Options, units, tmp) -> Tuple[TableCounts, dict]:
    r1 = ctx.pool.map(measurement_pass1, [StdJob(u, str(tmp), ctx.with_site, opts.rules, opts.delta)
                                          for u in units])
    ctx.publish_audit("MEASUREMENT", list(units[0].columns), [r["audit"] for r in r1])
    digests = merge_digest_maps(r["digests"] for r in r1)
    if opts.frozen_cutoffs is not None:
        cutoffs = dict(opts.frozen_cutoffs)
    else:
        cutoffs = compute_cutoffs(digests, opts.q_lo, opts.q_hi, opts.n_min)
    r2 = ctx.pool.map(measurement_pass2, [StdJob(u, str(tmp), ctx.with_site, opts.rules, opts.delta, cutoffs)
                                          for u in units])
    ctx.publish_audit("MEASUREMENT", list(units[0].columns), [r["audit"] for r in r2])
    concat_parts([r["out"] for r in r2], ctx.out_dir / "MEASUREMENT.csv", r1[0]["columns"], ctx.delimiter)
    removed: Dict[int, int] = defaultdict(int)
    for r in r2:
        for c, n in r["outliers"].items():
            removed[c] += n
    counts = TableCounts(rows_in=sum(r["rows_in"] for r in r1), rows_out=sum(r["rows_out"] for r in r2))
    for key, n in ((A.IMPLAUSIBLE, sum(r["implausible"] for r in r1)), (A.OUTLIER, sum(removed.values()))):
        if n:
            counts.removed[key] += n
    n_conv = sum(r["converted"] for r in r1)
    if n_conv:
        counts.rewritten[A.UNIT_CONVERTED] += n_conv
    stats = {
        "q_lo": opts.q_lo, "q_hi": opts.q_hi, "n_min": opts.n_min, "delta": opts.delta,
        "frozen": opts.frozen_cutoffs is not None,
        "cutoffs": {str(c): {**cut.to_dict(), "removed": removed.get(c, 0),
                             "n_observed": int(digests[c].total_weight) if c in digests else 0,
                             "kept_fraction": (1 - removed.get(c, 0) / digests[c].total_weight)
                             if c in digests and digests[c].total_weight else None}
                    for c, cut in sorted(cutoffs.items())},
        "exempt_concepts": sorted(c for c in digests if c not in cutoffs),
        "unit_conversions": n_conv,
        "implausible_removed": counts.removed.get(A.IMPLAUSIBLE, 0),
    }
    return counts, stats


def _standardize_visits(ctx: StageContext, table: str, opts: Stage4Options, units, tmp) -> Tuple[TableCounts, list]:
    parts_n = ctx.partitions(len(units))
    r1 = ctx.pool.map(visit_pass1, [StdJob(u, str(tmp), ctx.with_site, partitions=parts_n) for u in units])
    jobs: List[List[str]] = [[] for _ in range(parts_n)]
    for r in r1:
        for p, f in r["keys"].items():
            jobs[p].append(f)
    window_s = opts.window.total_seconds()
    results = ctx.pool.map(visit_partition, [(j, window_s) for j in jobs if j])
    by_unit: Dict[int, dict] = defaultdict(dict)
    mapping: List[tuple] = []
    undated = 0
    for decisions, m, u in results:
        for pos, d in decisions.items():
            by_unit[pos >> 40][pos & ((1 << 40) - 1)] = d
        mapping.extend(m)
        undated += u
    if undated:
        log.warning("%s: %d visits without a start were left unmerged", table, undated)
    r2 = ctx.pool.map(visit_pass2, [StdJob(u, str(tmp), ctx.with_site, decisions=by_unit.get(u.seq, {}))
                                    for u in units])
    ctx.publish_audit(table, list(units[0].columns), [r["audit"] for r in r2])
    concat_parts([r["out"] for r in r2], ctx.out_dir / f"{table}.csv", list(units[0].columns), ctx.delimiter)
    counts = TableCounts(rows_in=sum(r["rows_in"] for r in r1), rows_out=sum(r["rows_out"] for r in r2))
    n_abs = sum(r["absorbed"] for r in r2)
    n_rw = sum(r["rewritten"] for r in r2)
    if n_abs:
        counts.removed[A.VISIT_MERGED] += n_abs
    if n_rw:
        counts.rewritten[A.VISIT_MERGED] += n_rw
    mapping.sort(key=lambda t: (parse_int(t[0]) or 0, t[2], t[1]))
    return counts, [(table,) + m for m in mapping]


def run_stage4(ctx: StageContext, opts: Stage4Options) -> dict:
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    outlier_stats: dict = {}
    episode_rows: List[tuple] = []
    for table in TABLE_NAMES:
        sources = ctx.sources(table)
        if not sources:
            continue
        if table in PASSTHROUGH_TABLES:
            n = copy_passthrough(sources, ctx.out_dir / f"{table}.csv", ctx.delimiter)
            ctx.ledger.merge_counts(ctx.stage, table, TableCounts(rows_in=n, rows_out=n))
            continue
        units = make_units(sources, ctx.chunk_rows, ctx.delimiter)
        tmp = ctx.tmp_dir / table
        if not units:
            from .parallel import table_columns

            cols = table_columns(sources, get_schema(table), ctx.delimiter)
            if table == "MEASUREMENT":
                cols = cols + [c for c in (ORIG_VALUE, ORIG_UNIT) if c not in cols]
            concat_parts([], ctx.out_dir / f"{table}.csv", cols, ctx.delimiter)
            ctx.ledger.merge_counts(ctx.stage, table, TableCounts())
            continue
        if table == "MEASUREMENT":
            counts, outlier_stats = _standardize_measurement(ctx, opts, units, tmp)
        elif table in VISIT_TABLES:
            counts, rows = _standardize_visits(ctx, table, opts, units, tmp)
            episode_rows.extend(rows)
        else:
            res = ctx.pool.map(normalize_pass, [StdJob(u, str(tmp), ctx.with_site) for u in units])
            concat_parts([r["out"] for r in res], ctx.out_dir / f"{table}.csv", list(units[0].columns),
                         ctx.delimiter)
            counts = TableCounts(rows_in=sum(r["rows_in"] for r in res),
                                 rows_out=sum(r["rows_out"] for r in res))
        ctx.ledger.merge_counts(ctx.stage, table, counts)
    (ctx.out_dir / "outlier_stats.json").write_text(json.dumps(outlier_stats, indent=2) + "\n")
    with open(ctx.out_dir / EPISODE_MAP, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["table", "person_id", "visit_id", "episode_id", "episode_start", "episode_end"])
        w.writerows(episode_rows)
    ctx.cleanup_tmp()
    return {"outlier_concepts": len(outlier_stats.get("cutoffs", {})), "merged_episodes":
            len({(r[0], r[3]) for r in episode_rows})}
