"""Chunked streaming of OMOP table files and CSV writing helpers.

Chunks are located by byte offsets so a worker process can re-open the file,
seek, and parse its own slice without the coordinator shipping rows around.
"""

from __future__ import annotations

import csv
import io
import os
import shutil
import sys
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

from .schema import ParseError, Record, SchemaError, TableSchema, parse_record

csv.field_size_limit(sys.maxsize)

DEFAULT_CHUNK_ROWS = 500_000


class HeaderError(SchemaError):
    pass


@dataclass(frozen=True)
class ChunkSpan:
    index: int
    start: int  # byte offset of the first data row
    end: int  # byte offset one past the last data row
    first_row: int  # 0-based data-row index within the file
    n_rows: int  # physical records, including malformed ones


class _LiveRows:
    """Counts rows held by live TableChunk objects (used to check memory bounds)."""

    def __init__(self):
        self.current = 0
        self.peak = 0

    def add(self, n):
        self.current += n
        self.peak = max(self.peak, self.current)

    def release(self, n):
        self.current -= n

    def reset(self):
        self.current = 0
        self.peak = 0


live_rows = _LiveRows()


@dataclass
class TableChunk:
    schema: TableSchema
    columns: List[str]
    rows: List[List[str]]
    chunk_index: int
    byte_range: Tuple[int, int]
    first_row: int
    source_file: str = ""
    # (row index within file, raw fields) for rows with the wrong field count
    malformed: List[Tuple[int, List[str]]] = field(default_factory=list)
    row_indices: Optional[List[int]] = None

    def __post_init__(self):
        n = len(self.rows)
        live_rows.add(n)
        weakref.finalize(self, live_rows.release, n)

    def __len__(self):
        return len(self.rows)

    def index_of(self, i: int) -> int:
        """File row index of ``rows[i]``."""
        if self.row_indices is not None:
            return self.row_indices[i]
        return self.first_row + i

    def records(self) -> Iterator[Record]:
        for i, row in enumerate(self.rows):
            yield parse_record(self.schema, row, self.columns, self.index_of(i))


def find_table_file(directory, table: str) -> Optional[Path]:
    """``<TABLE>.csv`` in ``directory``, matched case-insensitively."""
    directory = Path(directory)
    if not directory.is_dir():
        return None
    want = f"{table}.csv".lower()
    for p in sorted(directory.iterdir()):
        if p.name.lower() == want and p.is_file():
            return p
    return None


def read_header(path, delimiter: str = ",") -> List[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        row = next(csv.reader(fh, delimiter=delimiter), None)
    if row is None:
        raise HeaderError(f"{path}: missing header row")
    return [c.strip() for c in row]


def normalize_header(header: Sequence[str]) -> List[str]:
    return [c.strip().lower() for c in header]


def check_header(schema: TableSchema, header: Sequence[str], path="") -> List[str]:
    cols = normalize_header(header)
    missing = [c for c in schema.required_columns() if c not in cols]
    if missing:
        raise HeaderError(f"{path or schema.table_name}: header lacks required columns {missing}")
    return cols


def _iter_records_bytes(fh, start: int) -> Iterator[Tuple[int, int, bytes]]:
    """Yield (start, end, raw bytes) of each CSV record from byte ``start``.

    Quote parity decides whether a newline ends the record, so quoted fields
    with embedded newlines stay in one record. Blank lines are skipped.
    """
    fh.seek(start)
    pos = start
    rec_start = start
    quotes = 0
    parts = []
    for line in fh:
        pos += len(line)
        quotes += line.count(b'"')
        parts.append(line)
        if quotes % 2 == 0:
            raw = parts[0] if len(parts) == 1 else b"".join(parts)
            if raw.strip(b"\r\n"):
                yield rec_start, pos, raw
            rec_start = pos
            quotes = 0
            parts = []
    if parts:
        yield rec_start, pos, b"".join(parts)


def _header_end(fh) -> int:
    fh.seek(0)
    for _, end, _ in _iter_records_bytes(fh, 0):
        return end
    return 0


def index_chunks(path, chunk_rows: int = DEFAULT_CHUNK_ROWS) -> List[ChunkSpan]:
    """Byte spans of consecutive ``chunk_rows``-record slices of a CSV file."""
    if chunk_rows <= 0:
        raise ValueError("chunk_rows must be positive")
    spans: List[ChunkSpan] = []
    with open(path, "rb") as fh:
        data_start = _header_end(fh)
        count = 0
        first = 0
        cstart = data_start
        last_end = data_start
        for _, end, _ in _iter_records_bytes(fh, data_start):
            count += 1
            last_end = end
            if count == chunk_rows:
                spans.append(ChunkSpan(len(spans), cstart, end, first, count))
                first += count
                cstart = end
                count = 0
        if count:
            spans.append(ChunkSpan(len(spans), cstart, last_end, first, count))
    return spans


def _parse_bytes(data: bytes, ncols: int, first_row: int, delimiter: str):
    rows: List[List[str]] = []
    bad: List[Tuple[int, List[str]]] = []
    idx = []
    text = data.decode("utf-8")
    i = first_row
    for row in csv.reader(io.StringIO(text, newline=""), delimiter=delimiter):
        if not row:
            continue
        if len(row) != ncols:
            bad.append((i, row))
        else:
            rows.append(row)
            idx.append(i)
        i += 1
    return rows, bad, idx


def read_span(path, span: ChunkSpan, schema: TableSchema, columns: Sequence[str],
              delimiter: str = ",") -> TableChunk:
    with open(path, "rb") as fh:
        fh.seek(span.start)
        data = fh.read(span.end - span.start)
    rows, bad, idx = _parse_bytes(data, len(columns), span.first_row, delimiter)
    return TableChunk(schema, list(columns), rows, span.index, (span.start, span.end),
                      span.first_row, str(path), bad, None if not bad else idx)


def stream_chunks(path, schema: TableSchema, chunk_rows: int = DEFAULT_CHUNK_ROWS,
                  delimiter: str = ",") -> Iterator[TableChunk]:
    """Stream ``path`` as TableChunks of ``chunk_rows`` records in file order.

    Only one chunk's bytes are held at a time. Rows whose field count differs
    from the header are carried in ``chunk.malformed`` rather than dropped.
    """
    if chunk_rows <= 0:
        raise ValueError("chunk_rows must be positive")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    columns = check_header(schema, read_header(path, delimiter), path)
    with open(path, "rb") as fh:
        data_start = _header_end(fh)
        buf = bytearray()
        count = 0
        first = 0
        cstart = data_start
        index = 0
        for rs, re_, raw in _iter_records_bytes(fh, data_start):
            if count == 0:
                cstart = rs
            buf += raw
            count += 1
            if count == chunk_rows:
                rows, bad, idx = _parse_bytes(bytes(buf), len(columns), first, delimiter)
                yield TableChunk(schema, columns, rows, index, (cstart, re_), first, str(path),
                                 bad, None if not bad else idx)
                index += 1
                first += count
                count = 0
                buf = bytearray()
        if count:
            rows, bad, idx = _parse_bytes(bytes(buf), len(columns), first, delimiter)
            yield TableChunk(schema, columns, rows, index, (cstart, cstart + len(buf)), first,
                             str(path), bad, None if not bad else idx)


def iter_rows(path, delimiter: str = ",") -> Iterator[List[str]]:
    """Data rows of a CSV file (header skipped), streamed."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        next(reader, None)
        for row in reader:
            if row:
                yield row


def count_rows(path, delimiter: str = ",") -> int:
    if not Path(path).exists():
        return 0
    n = 0
    with open(path, "rb") as fh:
        for _ in _iter_records_bytes(fh, _header_end(fh)):
            n += 1
    return n


def rows_to_text(rows, delimiter: str = ",") -> str:
    out = io.StringIO()
    w = csv.writer(out, delimiter=delimiter, lineterminator="\n")
    w.writerows(rows)
    return out.getvalue()


def write_csv(path, header: Sequence[str], rows, delimiter: str = ",") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def append_text(path, text: str, header: Optional[Sequence[str]] = None,
                delimiter: str = ",") -> None:
    """Append ``text`` in a single write; ``header`` is emitted if the file is new."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    payload = text
    if new and header is not None:
        payload = rows_to_text([header], delimiter) + text
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, payload.encode("utf-8"))
        os.fsync(fd)
    finally:
        os.close(fd)


def concat_parts(parts: Sequence[Path], dest, header: Sequence[str],
                 delimiter: str = ",") -> Path:
    """Write ``header`` then the raw bytes of each part file, in order; parts are removed."""
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "wb") as out:
        out.write(rows_to_text([header], delimiter).encode("utf-8"))
        for p in parts:
            if p is not None and Path(p).exists():
                with open(p, "rb") as fh:
                    shutil.copyfileobj(fh, out, 1 << 20)
                os.remove(p)
    return dest
