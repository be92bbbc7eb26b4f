"""Stage 2: invalid-concept removal, exact deduplication, temporal validation.

The three filters always run in that order. Invalid and temporal checks are
row-local; deduplication is global over the whole table (all sites), keyed on
person, primary concept and start time, keeping the first row in file order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import audit as A
from .audit import AuditEntry, TableCounts
from .context import StageContext, copy_passthrough
from .dedup import KeyIndexer, KeySink, dedup_rows, describe_first, find_duplicates, group_by_unit, partition_jobs
from .ingest import TableChunk, concat_parts, rows_to_text
from .parallel import PartFiles, Unit, load_chunk, make_units
from .schema import CLEANABLE_TABLES, PASSTHROUGH_TABLES, TableSchema, get_schema, parse_datetime, parse_int

log = logging.getLogger(__name__)


# ----------------------------------------------------------------- row checks

def invalid_reason(row: Sequence[str], concept_idx: int, person_idx: Optional[int]) -> Optional[str]:
    """Why a row fails the concept check, or None. Missing, empty and 0 are invalid."""
    raw = row[concept_idx].strip()
    if not raw:
        return "concept_missing"
    v = parse_int(raw)
    if v is None:
        return "concept_not_integer"
    if v == 0:
        return "concept_zero"
    if person_idx is not None:
        p = parse_int(row[person_idx])
        if p is None or p <= 0:
            return "person_id_invalid"
    return None


@dataclass(frozen=True)
class TemporalColumns:
    start: Optional[int]
    start_date: Optional[int]
    end: Optional[int]
    end_date: Optional[int]

    @classmethod
    def of(cls, schema: TableSchema, columns: Sequence[str]) -> "TemporalColumns":
        cols = list(columns)

        def ix(name):
            return cols.index(name) if name and name in cols else None

        return cls(ix(schema.start_column), ix(schema.start_date_column),
                   ix(schema.end_column), ix(schema.end_date_column))


def _pick(row, dt_idx, date_idx):
    """(text, is_date_only) of the first non-empty of datetime / date columns."""
    if dt_idx is not None and row[dt_idx].strip():
        return row[dt_idx], False
    if date_idx is not None and row[date_idx].strip():
        return row[date_idx], True
    return None, False


def temporal_reason(row: Sequence[str], tc: TemporalColumns, reference_now: datetime) -> Optional[str]:
    """Removal reason under the temporal rule, or None to keep.

    Removed iff end < start or start > reference_now; start == end is kept.
    An end that only has a date is compared against the start's date.
    """
    try:
        s_text, _ = _pick(row, tc.start, tc.start_date)
        e_text, e_date = _pick(row, tc.end, tc.end_date)
        start = parse_datetime(s_text) if s_text is not None else None
        end = parse_datetime(e_text) if e_text is not None else None
        # a start datetime that disagrees with its own date column is not checked here
    except ValueError:
        return "unparseable"
    if start is None:
        return None
    if start > reference_now:
        return "future_start"
    if end is not None:
        if e_date:
            if end.date() < start.date():
                return "end_before_start"
        elif end < start:
            return "end_before_start"
    return None


def malformed_original(fields: Sequence[str], ncols: int, delimiter: str = ",") -> List[str]:
    """Fit a wrong-length row into the audit layout; surplus fields fold into the last column."""
    if len(fields) < ncols:
        return list(fields) + [""] * (ncols - len(fields))
    head = list(fields[: ncols - 1])
    tail = rows_to_text([fields[ncols - 1:]], delimiter).rstrip("\n")
    return head + [tail]


# ------------------------------------------------------- chunk-level operations

def _entry(chunk: TableChunk, i: int, category: str, reason: str, action=A.REMOVED, site_id=None):
    row = chunk.rows[i]
    pid = parse_int(row[chunk.columns.index("person_id")]) if "person_id" in chunk.columns else None
    return AuditEntry(category, chunk.schema.table_name, chunk.source_file, chunk.index_of(i), pid,
                      reason, list(row), action, site_id)


def _subset(chunk: TableChunk, keep: List[int]) -> TableChunk:
    return TableChunk(chunk.schema, chunk.columns, [chunk.rows[i] for i in keep], chunk.chunk_index,
                      chunk.byte_range, chunk.first_row, chunk.source_file, [],
                      [chunk.index_of(i) for i in keep])


def remove_invalid_concepts(chunk: TableChunk) -> Tuple[TableChunk, List[AuditEntry]]:
    """Drop rows whose primary concept id is missing, empty or zero."""
    schema = chunk.schema
    if not schema.primary_concept_column:
        raise ValueError(f"{schema.table_name} has no primary concept column")
    ci = chunk.columns.index(schema.primary_concept_column)
    pi = chunk.columns.index("person_id") if "person_id" in chunk.columns else None
    keep, removed = [], []
    for i, row in enumerate(chunk.rows):
        why = invalid_reason(row, ci, pi)
        if why is None:
            keep.append(i)
        else:
            removed.append(_entry(chunk, i, A.CLEAN_INVALID, why))
    for ri, fields in chunk.malformed:
        removed.append(AuditEntry(A.CLEAN_INVALID, schema.table_name, chunk.source_file, ri, None,
                                  f"field_count:{len(fields)}",
                                  malformed_original(fields, len(chunk.columns))))
    return _subset(chunk, keep), removed


def validate_temporal(chunk: TableChunk, reference_now: datetime) -> Tuple[TableChunk, List[AuditEntry]]:
    tc = TemporalColumns.of(chunk.schema, chunk.columns)
    keep, removed = [], []
    for i, row in enumerate(chunk.rows):
        why = temporal_reason(row, tc, reference_now)
        if why is None:
            keep.append(i)
        else:
            removed.append(_entry(chunk, i, A.CLEAN_TEMPORAL, why))
    return _subset(chunk, keep), removed


def deduplicate(chunks: Iterable[TableChunk]) -> Tuple[List[TableChunk], List[AuditEntry]]:
    """First-wins exact dedup across all ``chunks`` (in-memory key set).

    The stage runner uses the disk-partitioned variant; this one serves small
    tables and tests and applies the identical rule.
    """
    chunks = list(chunks)
    if not chunks:
        return [], []
    ki = KeyIndexer(chunks[0].schema, chunks[0].columns)
    flat = [(c, i) for c in chunks for i in range(len(c.rows))]
    kept, removed = dedup_rows((c.rows[i] for c, i in flat), ki.key)
    dead = {k for k, _ in removed}
    entries = []
    for k, first in removed:
        c, i = flat[k]
        fc, fi = flat[first]
        entries.append(_entry(c, i, A.CLEAN_DUPLICATE, f"duplicate_of:{Path(fc.source_file).name}:{fc.index_of(fi)}"))
    out, pos = [], 0
    for c in chunks:
        idx = [i for i in range(len(c.rows)) if pos + i not in dead]
        pos += len(c.rows)
        out.append(_subset(c, idx))
    return out, entries


def droppable_columns(schema: TableSchema, columns: Sequence[str], flagged: Iterable[str],
                      warnings: Optional[List[str]] = None) -> List[str]:
    required = set(schema.required_columns())
    drop = []
    for c in flagged:
        if c not in columns:
            continue
        if c in required:
            if warnings is not None:
                warnings.append(f"{schema.table_name}.{c} flagged but required; kept")
            continue
        drop.append(c)
    return drop


def drop_flagged_columns(chunk: TableChunk, flagged: Iterable[str],
                         warnings: Optional[List[str]] = None) -> TableChunk:
    """Remove flagged optional columns; required columns survive even if flagged."""
    drop = set(droppable_columns(chunk.schema, chunk.columns, flagged, warnings))
    keep = [i for i, c in enumerate(chunk.columns) if c not in drop]
    return TableChunk(chunk.schema, [chunk.columns[i] for i in keep],
                      [[r[i] for i in keep] for r in chunk.rows], chunk.chunk_index, chunk.byte_range,
                      chunk.first_row, chunk.source_file, chunk.malformed, chunk.row_indices)


def clean_chunks(chunks: Iterable[TableChunk], reference_now: datetime):
    """All three filters in order over in-memory chunks: (kept chunks, audit entries)."""
    entries: List[AuditEntry] = []
    stage1 = []
    for c in chunks:
        k, e = remove_invalid_concepts(c)
        stage1.append(k)
        entries += e
    deduped, e = deduplicate(stage1)
    entries += e
    out = []
    for c in deduped:
        k, e = validate_temporal(c, reference_now)
        out.append(k)
        entries += e
    return out, entries


# ------------------------------------------------------------ parallel runner

@dataclass(frozen=True)
class CleanJob:
    unit: Unit
    tmp: str
    partitions: int
    with_site: bool
    reference_now: datetime
    keep_columns: tuple = ()
    dups: Optional[dict] = None  # row index -> first position (pass two)
    unit_paths: tuple = ()


def _audit_row(unit: Unit, row_index: int, original, category, reason, with_site, action=A.REMOVED):
    e = AuditEntry(category, unit.table, unit.source_label, row_index, None, reason, list(original), action,
                   unit.site_id)
    return e.to_row(with_site)


def clean_pass1(job: CleanJob) -> dict:
    """Invalid filter plus key emission for the dedup partitions."""
    unit = job.unit
    schema = get_schema(unit.table)
    chunk = load_chunk(unit)
    cols = chunk.columns
    ci = cols.index(schema.primary_concept_column)
    pi = cols.index("person_id") if "person_id" in cols else None
    ki = KeyIndexer(schema, cols)
    sink = KeySink(Path(job.tmp) / "keys", unit.seq, job.partitions)
    parts = PartFiles(Path(job.tmp) / "audit", unit.seq)
    base = unit.pos_base
    invalid = 0
    # malformed rows are audited in file order along with the invalid ones
    bad = dict(chunk.malformed)
    for i, row in enumerate(chunk.rows):
        ri = chunk.index_of(i)
        why = invalid_reason(row, ci, pi)
        if why is None:
            sink.add(base + ri, ki.key(row))
        else:
            invalid += 1
            parts.add(A.CLEAN_INVALID, _audit_row(unit, ri, row, A.CLEAN_INVALID, why, job.with_site))
    for ri, fields in sorted(bad.items()):
        invalid += 1
        parts.add(A.CLEAN_INVALID, _audit_row(unit, ri, malformed_original(fields, len(cols)),
                                              A.CLEAN_INVALID, f"field_count:{len(fields)}",
                                              job.with_site))
    return {"rows_in": unit.span.n_rows, "invalid": invalid, "keys": sink.close(),
            "audit": parts.close()}


def clean_pass2(job: CleanJob) -> dict:
    """Re-read the span, drop invalid rows silently, audit duplicates and temporal failures."""
    unit = job.unit
    schema = get_schema(unit.table)
    chunk = load_chunk(unit)
    cols = chunk.columns
    ci = cols.index(schema.primary_concept_column)
    pi = cols.index("person_id") if "person_id" in cols else None
    tc = TemporalColumns.of(schema, cols)
    dups = job.dups or {}
    keep_idx = list(job.keep_columns)
    parts = PartFiles(Path(job.tmp) / "audit2", unit.seq)
    out = []
    n_dup = n_tmp = 0
    for i, row in enumerate(chunk.rows):
        ri = chunk.index_of(i)
        if invalid_reason(row, ci, pi) is not None:
            continue
        first = dups.get(ri)
        if first is not None:
            n_dup += 1
            parts.add(A.CLEAN_DUPLICATE, _audit_row(unit, ri, row, A.CLEAN_DUPLICATE,
                                                    describe_first(first, job.unit_paths), job.with_site))
            continue
        why = temporal_reason(row, tc, job.reference_now)
        if why is not None:
            n_tmp += 1
            parts.add(A.CLEAN_TEMPORAL, _audit_row(unit, ri, row, A.CLEAN_TEMPORAL, why, job.with_site))
            continue
        out.append([row[k] for k in keep_idx])
    outp = Path(job.tmp) / "out" / f"{unit.seq:06d}.part"
    outp.parent.mkdir(parents=True, exist_ok=True)
    outp.write_text(rows_to_text(out), encoding="utf-8")
    return {"rows_out": len(out), "duplicate": n_dup, "temporal": n_tmp, "out": str(outp),
            "audit": parts.close()}


def _find(files):
    return find_duplicates(files)


def clean_table(ctx: StageContext, table: str, flagged: Sequence[str], reference_now: datetime,
                warnings: List[str]) -> Optional[TableCounts]:
    sources = ctx.sources(table)
    if not sources:
        return None
    schema = get_schema(table)
    units = make_units(sources, ctx.chunk_rows, ctx.delimiter)
    columns = list(units[0].columns) if units else _header_only(sources, schema, ctx)
    drop = set(droppable_columns(schema, columns, flagged, warnings))
    keep_cols = tuple(i for i, c in enumerate(columns) if c not in drop)
    out_header = [columns[i] for i in keep_cols]
    tmp = ctx.tmp_dir / table
    parts_n = ctx.partitions(len(units))
    unit_paths = tuple(u.path for u in units)
    jobs = [CleanJob(u, str(tmp), parts_n, ctx.with_site, reference_now) for u in units]
    r1 = ctx.pool.map(clean_pass1, jobs)
    ctx.publish_audit(table, columns, [r["audit"] for r in r1])
    dup_lists = ctx.pool.map(_find, partition_jobs((r["keys"] for r in r1), parts_n))
    by_unit = group_by_unit(dup_lists)
    jobs2 = [CleanJob(u, str(tmp), parts_n, ctx.with_site, reference_now, keep_cols,
                      by_unit.get(u.seq, {}), unit_paths) for u in units]
    r2 = ctx.pool.map(clean_pass2, jobs2)
    ctx.publish_audit(table, columns, [r["audit"] for r in r2])
    concat_parts([r["out"] for r in r2], ctx.out_dir / f"{table}.csv", out_header, ctx.delimiter)
    counts = TableCounts()
    counts.rows_in = sum(r["rows_in"] for r in r1)
    counts.rows_out = sum(r["rows_out"] for r in r2)
    for name, n in ((A.CLEAN_INVALID, sum(r["invalid"] for r in r1)),
                    (A.CLEAN_DUPLICATE, sum(r["duplicate"] for r in r2)),
                    (A.CLEAN_TEMPORAL, sum(r["temporal"] for r in r2))):
        if n:
            counts.removed[name] += n
    return counts


def _header_only(sources, schema, ctx) -> List[str]:
    from .parallel import table_columns

    return table_columns(sources, schema, ctx.delimiter)


def run_stage2(ctx: StageContext, flagged: Dict[str, List[str]], reference_now: datetime) -> dict:
    """Clean every cleanable table present and copy the pass-through tables unchanged."""
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    warnings: List[str] = []
    for table in CLEANABLE_TABLES:
        counts = clean_table(ctx, table, flagged.get(table, []), reference_now, warnings)
        if counts is not None:
            ctx.ledger.merge_counts(ctx.stage, table, counts)
    for table in PASSTHROUGH_TABLES:
        src = ctx.sources(table)
        if src:
            n = copy_passthrough(src, ctx.out_dir / f"{table}.csv", ctx.delimiter)
            c = TableCounts(rows_in=n, rows_out=n)
            ctx.ledger.merge_counts(ctx.stage, table, c)
    ctx.cleanup_tmp()
    for w in warnings:
        log.warning(w)
    return {"warnings": warnings, "reference_now": reference_now.isoformat()}
