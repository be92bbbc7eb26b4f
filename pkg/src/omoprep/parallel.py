"""Work units and the worker pool.

A unit is one byte span of one table file. Workers write their outputs to
per-unit part files and return small summaries; the coordinator stitches the
parts together in unit order, so output bytes do not depend on worker count.
"""

from __future__ import annotations

import os
import resource
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence

from .ingest import ChunkSpan, TableChunk, check_header, index_chunks, read_header, read_span, rows_to_text
from .schema import TableSchema, get_schema


@dataclass(frozen=True)
class Source:
    table: str
    path: str
    site_id: Optional[str] = None
    label: Optional[str] = None  # recorded as the audit source file; defaults to path


@dataclass(frozen=True)
class Unit:
    seq: int  # position in the table's unit order
    table: str
    path: str
    site_id: Optional[str]
    span: ChunkSpan
    file_columns: tuple
    columns: tuple  # canonical column order for the table
    delimiter: str = ","
    label: Optional[str] = None

    @property
    def source_label(self) -> str:
        return self.label or self.path

    @property
    def pos_base(self) -> int:
        """Global row position base; positions are unique across all units of a table."""
        return self.seq << 40


def table_columns(sources: Sequence[Source], schema: TableSchema, delimiter: str = ",") -> List[str]:
    """Canonical header across sources; every source must carry the same column set."""
    canonical = None
    for s in sources:
        cols = check_header(schema, read_header(s.path, delimiter), s.path)
        if canonical is None:
            canonical = cols
        elif sorted(cols) != sorted(canonical):
            raise ValueError(f"{s.path}: columns differ from the first site's header for {schema.table_name}")
    return list(canonical or [])


def make_units(sources: Sequence[Source], chunk_rows: int, delimiter: str = ",") -> List[Unit]:
    if not sources:
        return []
    schema = get_schema(sources[0].table)
    canonical = tuple(table_columns(sources, schema, delimiter))
    units = []
    for s in sources:
        fcols = tuple(check_header(schema, read_header(s.path, delimiter), s.path))
        for span in index_chunks(s.path, chunk_rows):
            units.append(Unit(len(units), s.table, str(s.path), s.site_id, span, fcols, canonical,
                              delimiter, s.label))
    return units


def load_chunk(unit: Unit) -> TableChunk:
    schema = get_schema(unit.table)
    chunk = read_span(unit.path, unit.span, schema, unit.file_columns, unit.delimiter)
    chunk.source_file = unit.source_label
    if unit.file_columns != unit.columns:
        order = [unit.file_columns.index(c) for c in unit.columns]
        chunk.rows = [[r[i] for i in order] for r in chunk.rows]
        chunk.columns = list(unit.columns)
    return chunk


class PartFiles:
    """Per-unit scratch files: one text buffer per logical output, written on close."""

    def __init__(self, directory, unit_seq: int, delimiter: str = ","):
        self.directory = Path(directory)
        self.unit_seq = unit_seq
        self.delimiter = delimiter
        self.rows: dict = {}

    def add(self, name: str, row: Sequence[str]) -> None:
        self.rows.setdefault(name, []).append(row)

    def extend(self, name: str, rows) -> None:
        self.rows.setdefault(name, []).extend(rows)

    def close(self) -> dict:
        """Write buffers; returns {name: path} for non-empty outputs."""
        self.directory.mkdir(parents=True, exist_ok=True)
        out = {}
        for name, rows in self.rows.items():
            p = self.directory / f"{name}.{self.unit_seq:06d}.part"
            with open(p, "w", encoding="utf-8", newline="") as fh:
                fh.write(rows_to_text(rows, self.delimiter))
            out[name] = str(p)
        self.rows = {}
        return out


def self_peak_rss_kb() -> int:
    """Peak RSS of this process image.

    ``ru_maxrss`` survives ``exec``, so a CLI launched from a large parent
    would report the parent's size; ``VmHWM`` starts fresh with the new image.
    """
    try:
        with open("/proc/self/status", encoding="ascii") as fh:
            for line in fh:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1])
    except OSError:
        pass
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss


def children_peak_rss_kb() -> int:
    return resource.getrusage(resource.RUSAGE_CHILDREN).ru_maxrss


class Pool:
    """Fixed-size process pool with ordered results; ``workers == 1`` runs inline."""

    def __init__(self, workers: int = 8):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self._ex: Optional[ProcessPoolExecutor] = None

    def __enter__(self):
        if self.workers > 1:
            self._ex = ProcessPoolExecutor(max_workers=self.workers)
        return self

    def __exit__(self, *exc):
        if self._ex is not None:
            self._ex.shutdown(wait=True, cancel_futures=True)
            self._ex = None

    def map(self, func: Callable, items: Iterable) -> list:
        items = list(items)
        if not items:
            return []
        if self._ex is None or len(items) == 1:
            return [func(x) for x in items]
        return list(self._ex.map(func, items))


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1
