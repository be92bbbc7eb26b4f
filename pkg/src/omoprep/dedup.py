"""Exact, global duplicate detection over chunked tables.

Pass one writes ``position<TAB>key`` lines into hash partitions, one file per
(unit, partition). Each partition is then scanned in unit order, so the first
occurrence in file order wins no matter how many partitions or workers were
used. The coordinator routes the duplicate positions back to their units for
the output pass.
"""

from __future__ import annotations

import zlib
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .schema import TableSchema, format_datetime, parse_datetime, parse_int

POS_SHIFT = 40
ROW_MASK = (1 << POS_SHIFT) - 1
MISSING_TIME = "<missing>"


def unit_of(pos: int) -> int:
    return pos >> POS_SHIFT


def row_of(pos: int) -> int:
    return pos & ROW_MASK


def _clean(text: str) -> str:
    return text.replace("\t", " ").replace("\n", " ").replace("\r", " ")


def key_text(person: str, concept: str, when: str) -> str:
    """Composite key of person, concept and canonical event time."""
    p = parse_int(person)
    c = parse_int(concept)
    return f"{p if p is not None else _clean(person)}|{c if c is not None else _clean(concept)}|{when}"


def event_time_text(row: Sequence[str], dt_idx: Optional[int], date_idx: Optional[int]) -> str:
    """Canonical start time of a row; date-only values expand to midnight."""
    for i in (dt_idx, date_idx):
        if i is None:
            continue
        raw = row[i]
        if raw.strip():
            try:
                return format_datetime(parse_datetime(raw))
            except ValueError:
                return "raw:" + _clean(raw)
    return MISSING_TIME


class KeyIndexer:
    """Column positions needed to build a dedup key for one table."""

    def __init__(self, schema: TableSchema, columns: Sequence[str], concept_column: Optional[str] = None):
        cols = list(columns)
        self.p = cols.index("person_id")
        self.c = cols.index(concept_column or schema.primary_concept_column)
        self.dt = cols.index(schema.start_column) if schema.start_column in cols else None
        self.d = cols.index(schema.start_date_column) if schema.start_date_column in cols else None

    def key(self, row: Sequence[str]) -> str:
        return key_text(row[self.p], row[self.c], event_time_text(row, self.dt, self.d))


def partition_of(key: str, partitions: int) -> int:
    return zlib.crc32(key.encode("utf-8")) % partitions


class KeySink:
    """Buffers ``pos<TAB>key`` lines per partition for one unit."""

    def __init__(self, directory, unit_seq: int, partitions: int):
        self.directory = Path(directory)
        self.unit_seq = unit_seq
        self.partitions = partitions
        self.lines: Dict[int, List[str]] = defaultdict(list)

    def add(self, pos: int, key: str) -> None:
        self.lines[partition_of(key, self.partitions)].append(f"{pos}\t{key}\n")

    def close(self) -> Dict[int, str]:
        self.directory.mkdir(parents=True, exist_ok=True)
        out = {}
        for part, lines in sorted(self.lines.items()):
            path = self.directory / f"keys.p{part:04d}.u{self.unit_seq:06d}"
            with open(path, "w", encoding="utf-8") as fh:
                fh.writelines(lines)
            out[part] = str(path)
        self.lines = defaultdict(list)
        return out


def find_duplicates(files: Sequence[str]) -> List[Tuple[int, int]]:
    """(duplicate position, first position) for every repeat key in ``files``.

    ``files`` must be given in unit order; positions inside a file ascend.
    """
    first: Dict[str, int] = {}
    dups: List[Tuple[int, int]] = []
    for f in files:
        with open(f, encoding="utf-8") as fh:
            for line in fh:
                pos_s, key = line.rstrip("\n").split("\t", 1)
                pos = int(pos_s)
                seen = first.get(key)
                if seen is None:
                    first[key] = pos
                else:
                    dups.append((pos, seen))
        Path(f).unlink(missing_ok=True)
    return dups


def partition_jobs(unit_results: Iterable[Dict[int, str]], partitions: int) -> List[List[str]]:
    """Per-partition file lists in unit order from each unit's ``KeySink.close()`` result."""
    jobs: List[List[str]] = [[] for _ in range(partitions)]
    for res in unit_results:
        for part, path in res.items():
            jobs[part].append(path)
    return [j for j in jobs if j]


def group_by_unit(dup_lists: Iterable[List[Tuple[int, int]]]) -> Dict[int, Dict[int, int]]:
    """{unit seq: {row index: first position}} from partition results."""
    out: Dict[int, Dict[int, int]] = defaultdict(dict)
    for dups in dup_lists:
        for pos, first in dups:
            out[unit_of(pos)][row_of(pos)] = first
    return dict(out)


def describe_first(first_pos: int, unit_paths: Sequence[str]) -> str:
    return f"duplicate_of:{Path(unit_paths[unit_of(first_pos)]).name}:{row_of(first_pos)}"


def dedup_rows(rows: Iterable[Sequence[str]], key_fn) -> Tuple[List[int], List[Tuple[int, int]]]:
    """In-memory first-wins dedup: (kept indices, (removed index, first index))."""
    seen: Dict[str, int] = {}
    kept, removed = [], []
    for i, row in enumerate(rows):
        k = key_fn(row)
        if k in seen:
            removed.append((i, seen[k]))
        else:
            seen[k] = i
            kept.append(i)
    return kept, removed
