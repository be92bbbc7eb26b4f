"""Stage 3: crosswalk mapping to SNOMED plus post-mapping deduplication.

Only MEASUREMENT, OBSERVATION, PROCEDURE_OCCURRENCE and DEVICE_EXPOSURE are
mapped; the other tables are copied through. A rewritten row keeps its source
concept id in ``__source_concept_id``. Unmapped ids stay in the data and are
logged, never removed.
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from . import audit as A
from .audit import AuditEntry, TableCounts
from .context import StageContext, copy_passthrough
from .dedup import KeyIndexer, KeySink, dedup_rows, describe_first, find_duplicates, group_by_unit, partition_jobs
from .ingest import TableChunk, concat_parts, rows_to_text
from .parallel import PartFiles, Unit, load_chunk, make_units
from .schema import MAPPED_TABLES, TABLE_NAMES, get_schema, parse_int

log = logging.getLogger(__name__)

PROVENANCE_COLUMN = "__source_concept_id"
TARGET_VOCABULARY = "SNOMED"
NO_VOCABULARY = "<none>"


class CrosswalkError(ValueError):
    pass


@dataclass
class ConceptCrosswalk:
    targets: Dict[int, int]
    source_vocabulary: Dict[int, str]
    target_vocabulary: str = TARGET_VOCABULARY
    # optional concept id -> vocabulary, decides "already SNOMED"
    dictionary: Dict[int, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.targets)

    def vocabulary_counts(self) -> Dict[str, int]:
        return dict(sorted(Counter(self.source_vocabulary.values()).items()))

    def vocabulary_of(self, concept: int) -> str:
        if concept in self.source_vocabulary:
            return self.source_vocabulary[concept]
        return self.dictionary.get(concept, NO_VOCABULARY)

    def is_target(self, concept: int) -> bool:
        return self.dictionary.get(concept, "").upper() == self.target_vocabulary.upper()

    def reverse(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = defaultdict(list)
        for s, t in sorted(self.targets.items()):
            out[t].append(s)
        return dict(out)


def load_concept_dictionary(path) -> Dict[int, str]:
    """concept_id -> vocabulary from a ``concept_id,vocabulary_id`` file."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            cid = parse_int(row.get("concept_id", ""))
            if cid is not None:
                out[cid] = (row.get("vocabulary_id") or row.get("vocabulary") or "").strip()
    return out


def load_crosswalk(path, dictionary_path=None) -> ConceptCrosswalk:
    """Read a 4-column crosswalk; one-to-many sources and non-SNOMED targets are errors."""
    targets: Dict[int, int] = {}
    vocab: Dict[int, str] = {}
    conflicts: Dict[int, set] = defaultdict(set)
    bad_vocab = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        need = {"source_concept_id", "source_vocabulary", "target_concept_id", "target_vocabulary"}
        missing = need - set(reader.fieldnames or [])
        if missing:
            raise CrosswalkError(f"{path}: missing columns {sorted(missing)}")
        for line, row in enumerate(reader, start=2):
            s = parse_int(row["source_concept_id"])
            t = parse_int(row["target_concept_id"])
            if s is None or t is None:
                raise CrosswalkError(f"{path}:{line}: non-integer concept id")
            if row["target_vocabulary"].strip().upper() != TARGET_VOCABULARY:
                bad_vocab.append((line, row["target_vocabulary"]))
                continue
            if s in targets and targets[s] != t:
                conflicts[s].update({targets[s], t})
            targets[s] = t
            vocab[s] = row["source_vocabulary"].strip()
    if bad_vocab:
        raise CrosswalkError(f"{path}: non-SNOMED target vocabulary on lines "
                             f"{[l for l, _ in bad_vocab[:10]]}")
    if conflicts:
        listing = {s: sorted(ts) for s, ts in sorted(conflicts.items())[:20]}
        raise CrosswalkError(f"{path}: one-to-many sources {listing}")
    dictionary = load_concept_dictionary(dictionary_path) if dictionary_path else {}
    return ConceptCrosswalk(targets, vocab, TARGET_VOCABULARY, dictionary)


@dataclass
class MappingStats:
    """Per source vocabulary: mapped, already_target, unmapped; plus post-mapping duplicates."""

    by_vocabulary: Dict[str, Counter] = field(default_factory=lambda: defaultdict(Counter))
    duplicates_removed: int = 0

    def add(self, vocabulary: str, kind: str, n: int = 1) -> None:
        self.by_vocabulary[vocabulary][kind] += n

    def merge(self, other: "MappingStats") -> None:
        for v, c in other.by_vocabulary.items():
            self.by_vocabulary[v].update(c)
        self.duplicates_removed += other.duplicates_removed

    def total(self, kind: str) -> int:
        return sum(c[kind] for c in self.by_vocabulary.values())

    @property
    def rows_in(self) -> int:
        return self.total("mapped") + self.total("already_target") + self.total("unmapped")

    def to_dict(self) -> dict:
        return {
            "by_vocabulary": {v: {k: c.get(k, 0) for k in ("mapped", "already_target", "unmapped")}
                              for v, c in sorted(self.by_vocabulary.items())},
            "mapped": self.total("mapped"),
            "already_target": self.total("already_target"),
            "unmapped": self.total("unmapped"),
            "rows_in": self.rows_in,
            "duplicates_removed": self.duplicates_removed,
        }


class RowMapper:
    """Maps the primary concept of raw rows; adds the provenance column if absent."""

    def __init__(self, table: str, columns: Sequence[str], crosswalk: ConceptCrosswalk):
        self.schema = get_schema(table)
        self.columns = list(columns)
        self.ci = self.columns.index(self.schema.primary_concept_column)
        self.has_prov = PROVENANCE_COLUMN in self.columns
        self.pv = self.columns.index(PROVENANCE_COLUMN) if self.has_prov else len(self.columns)
        self.out_columns = self.columns if self.has_prov else self.columns + [PROVENANCE_COLUMN]
        self.cw = crosswalk

    def map_row(self, row: Sequence[str]) -> Tuple[List[str], str, str]:
        """(mapped row, kind, source vocabulary); kind is mapped | already_target | unmapped."""
        out = list(row) if self.has_prov else list(row) + [""]
        cid = parse_int(row[self.ci])
        if cid is None:
            return out, "unmapped", NO_VOCABULARY
        target = self.cw.targets.get(cid)
        if target is not None:
            out[self.ci] = str(target)
            if not out[self.pv]:
                out[self.pv] = str(cid)
            return out, "mapped", self.cw.vocabulary_of(cid)
        vocab = self.cw.vocabulary_of(cid)
        if self.cw.is_target(cid):
            return out, "already_target", vocab
        return out, "unmapped", vocab


def map_concepts(chunk: TableChunk, crosswalk: ConceptCrosswalk):
    """(mapped chunk, MappingStats, unmapped audit entries) for one chunk."""
    table = chunk.schema.table_name
    if table not in MAPPED_TABLES:
        raise ValueError(f"{table} is not a mapping target table")
    mapper = RowMapper(table, chunk.columns, crosswalk)
    stats = MappingStats()
    rows, entries = [], []
    pi = chunk.columns.index("person_id")
    for i, row in enumerate(chunk.rows):
        out, kind, vocab = mapper.map_row(row)
        stats.add(vocab, kind)
        rows.append(out)
        if kind == "unmapped":
            entries.append(AuditEntry(A.MAP_UNMAPPED, table, chunk.source_file, chunk.index_of(i),
                                      parse_int(row[pi]), f"unmapped:{row[mapper.ci]}:{vocab}",
                                      list(row), A.LOGGED))
    mapped = TableChunk(chunk.schema, mapper.out_columns, rows, chunk.chunk_index, chunk.byte_range,
                        chunk.first_row, chunk.source_file, [], chunk.row_indices)
    return mapped, stats, entries


def dedupe_post_mapping(chunks: Iterable[TableChunk]) -> Tuple[List[TableChunk], List[AuditEntry]]:
    """First-wins dedup on (person, mapped concept, start time) over mapped chunks."""
    chunks = list(chunks)
    if not chunks:
        return [], []
    ki = KeyIndexer(chunks[0].schema, chunks[0].columns)
    flat = [(c, i) for c in chunks for i in range(len(c.rows))]
    _, removed = dedup_rows((c.rows[i] for c, i in flat), ki.key)
    dead = {k for k, _ in removed}
    entries = []
    pi = chunks[0].columns.index("person_id")
    for k, first in removed:
        c, i = flat[k]
        fc, fi = flat[first]
        entries.append(AuditEntry(A.MAP_DUPLICATE, c.schema.table_name, c.source_file, c.index_of(i),
                                  parse_int(c.rows[i][pi]),
                                  f"duplicate_of:{Path(fc.source_file).name}:{fc.index_of(fi)}",
                                  _unmap(c.rows[i], c.columns, c.schema.primary_concept_column)))
    out, pos = [], 0
    for c in chunks:
        keep = [i for i in range(len(c.rows)) if pos + i not in dead]
        pos += len(c.rows)
        out.append(TableChunk(c.schema, c.columns, [c.rows[i] for i in keep], c.chunk_index,
                              c.byte_range, c.first_row, c.source_file, [],
                              [c.index_of(i) for i in keep]))
    return out, entries


def _unmap(row: Sequence[str], columns: Sequence[str], concept_column: str) -> List[str]:
    """Pre-mapping form of a mapped row: the provenance id goes back into the concept column."""
    cols = list(columns)
    out = list(row)
    pv = cols.index(PROVENANCE_COLUMN)
    if out[pv]:
        out[cols.index(concept_column)] = out[pv]
    return out


# ------------------------------------------------------------ parallel runner

@dataclass(frozen=True)
class MapJob:
    unit: Unit
    tmp: str
    partitions: int
    with_site: bool
    crosswalk: ConceptCrosswalk
    dups: Optional[dict] = None
    unit_paths: tuple = ()


def map_pass1(job: MapJob) -> dict:
    unit = job.unit
    chunk = load_chunk(unit)
    mapper = RowMapper(unit.table, chunk.columns, job.crosswalk)
    ki = KeyIndexer(mapper.schema, mapper.out_columns)
    sink = KeySink(Path(job.tmp) / "keys", unit.seq, job.partitions)
    parts = PartFiles(Path(job.tmp) / "audit", unit.seq)
    stats = MappingStats()
    base = unit.pos_base
    rewritten = 0
    for i, row in enumerate(chunk.rows):
        ri = chunk.index_of(i)
        out, kind, vocab = mapper.map_row(row)
        stats.add(vocab, kind)
        if kind == "mapped" and out[mapper.ci] != row[mapper.ci]:
            rewritten += 1
        if kind == "unmapped":
            e = AuditEntry(A.MAP_UNMAPPED, unit.table, unit.source_label, ri, None,
                           f"unmapped:{row[mapper.ci]}:{vocab}", list(row), A.LOGGED, unit.site_id)
            parts.add(A.MAP_UNMAPPED, e.to_row(job.with_site))
        sink.add(base + ri, ki.key(out))
    if chunk.malformed:
        raise ValueError(f"{unit.path}: {len(chunk.malformed)} malformed rows after cleaning")
    return {"rows_in": len(chunk.rows), "stats": stats, "rewritten": rewritten, "keys": sink.close(),
            "audit": parts.close(), "out_columns": mapper.out_columns}


def map_pass2(job: MapJob) -> dict:
    unit = job.unit
    chunk = load_chunk(unit)
    mapper = RowMapper(unit.table, chunk.columns, job.crosswalk)
    parts = PartFiles(Path(job.tmp) / "audit2", unit.seq)
    dups = job.dups or {}
    out_rows = []
    for i, row in enumerate(chunk.rows):
        ri = chunk.index_of(i)
        first = dups.get(ri)
        if first is not None:
            e = AuditEntry(A.MAP_DUPLICATE, unit.table, unit.source_label, ri, None,
                           describe_first(first, job.unit_paths), list(row), A.REMOVED, unit.site_id)
            parts.add(A.MAP_DUPLICATE, e.to_row(job.with_site))
            continue
        out_rows.append(mapper.map_row(row)[0])
    outp = Path(job.tmp) / "out" / f"{unit.seq:06d}.part"
    outp.parent.mkdir(parents=True, exist_ok=True)
    outp.write_text(rows_to_text(out_rows), encoding="utf-8")
    return {"rows_out": len(out_rows), "duplicate": len(dups), "out": str(outp), "audit": parts.close()}


def map_table(ctx: StageContext, table: str, crosswalk: ConceptCrosswalk,
              stats: MappingStats) -> Optional[TableCounts]:
    sources = ctx.sources(table)
    if not sources:
        return None
    units = make_units(sources, ctx.chunk_rows, ctx.delimiter)
    if not units:
        from .parallel import table_columns

        cols = table_columns(sources, get_schema(table), ctx.delimiter)
        header = cols if PROVENANCE_COLUMN in cols else cols + [PROVENANCE_COLUMN]
        concat_parts([], ctx.out_dir / f"{table}.csv", header, ctx.delimiter)
        return TableCounts()
    columns = list(units[0].columns)
    tmp = ctx.tmp_dir / table
    parts_n = ctx.partitions(len(units))
    unit_paths = tuple(u.path for u in units)
    r1 = ctx.pool.map(map_pass1, [MapJob(u, str(tmp), parts_n, ctx.with_site, crosswalk) for u in units])
    ctx.publish_audit(table, columns, [r["audit"] for r in r1])
    dup_lists = ctx.pool.map(find_duplicates, partition_jobs((r["keys"] for r in r1), parts_n))
    by_unit = group_by_unit(dup_lists)
    r2 = ctx.pool.map(map_pass2, [MapJob(u, str(tmp), parts_n, ctx.with_site, crosswalk,
                                         by_unit.get(u.seq, {}), unit_paths) for u in units])
    ctx.publish_audit(table, columns, [r["audit"] for r in r2])
    concat_parts([r["out"] for r in r2], ctx.out_dir / f"{table}.csv", r1[0]["out_columns"], ctx.delimiter)
    counts = TableCounts(rows_in=sum(r["rows_in"] for r in r1), rows_out=sum(r["rows_out"] for r in r2))
    n_dup = sum(r["duplicate"] for r in r2)
    if n_dup:
        counts.removed[A.MAP_DUPLICATE] += n_dup
    table_stats = MappingStats()
    for r in r1:
        table_stats.merge(r["stats"])
    n_unmapped = table_stats.total("unmapped")
    if n_unmapped:
        counts.logged[A.MAP_UNMAPPED] += n_unmapped
    n_rw = sum(r["rewritten"] for r in r1)
    if n_rw:
        counts.rewritten["mapped"] += n_rw
    table_stats.duplicates_removed = n_dup
    stats.merge(table_stats)
    ctx.options.setdefault("table_stats", {})[table] = table_stats.to_dict()
    return counts


def run_stage3(ctx: StageContext, crosswalk: ConceptCrosswalk) -> dict:
    ctx.out_dir.mkdir(parents=True, exist_ok=True)
    stats = MappingStats()
    for table in TABLE_NAMES:
        if table in MAPPED_TABLES:
            counts = map_table(ctx, table, crosswalk, stats)
        else:
            src = ctx.sources(table)
            counts = None
            if src:
                n = copy_passthrough(src, ctx.out_dir / f"{table}.csv", ctx.delimiter)
                counts = TableCounts(rows_in=n, rows_out=n)
        if counts is not None:
            ctx.ledger.merge_counts(ctx.stage, table, counts)
    doc = {"crosswalk_entries": len(crosswalk),
           "crosswalk_vocabularies": crosswalk.vocabulary_counts(),
           "overall": stats.to_dict(),
           "tables": ctx.options.get("table_stats", {})}
    (ctx.out_dir / "mapping_stats.json").write_text(json.dumps(doc, indent=2) + "\n")
    ctx.cleanup_tmp()
    return {"mapping": stats.to_dict()}
