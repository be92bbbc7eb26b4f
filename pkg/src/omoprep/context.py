"""Per-stage execution context shared by the stage runners."""

from __future__ import annotations

import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .audit import RunLedger, TableCounts, audit_header, audit_path
from .ingest import append_text, find_table_file, read_header, rows_to_text
from .parallel import Pool, Source


@dataclass
class StageContext:
    run_dir: Path
    stage: str
    pool: Pool
    ledger: RunLedger
    chunk_rows: int = 500_000
    delimiter: str = ","
    with_site: bool = False
    # table name -> ordered sources; only set for the first cleaning stage
    input_sources: Optional[Dict[str, List[Source]]] = None
    options: dict = field(default_factory=dict)

    @property
    def out_dir(self) -> Path:
        return self.run_dir / self.stage

    @property
    def tmp_dir(self) -> Path:
        return self.run_dir / "tmp" / self.stage

    def previous_dir(self) -> Path:
        n = int(self.stage[-1])
        return self.run_dir / f"stage{n - 1}"

    def sources(self, table: str) -> List[Source]:
        if self.input_sources is not None:
            return list(self.input_sources.get(table, []))
        p = find_table_file(self.previous_dir(), table)
        # run-relative label so audits do not depend on where the run directory lives
        return [Source(table, str(p), label=f"{p.parent.name}/{p.name}")] if p else []

    def partitions(self, n_units: int) -> int:
        """Dedup partition count; bounded by chunk count so partition memory stays O(chunk)."""
        return max(1, self.pool.workers, n_units)

    def counts(self, table: str) -> TableCounts:
        return self.ledger.stage(self.stage).table(table)

    def publish_audit(self, table: str, columns: Sequence[str],
                      unit_audits: Sequence[Dict[str, str]]) -> None:
        """Append each unit's audit part files, in unit order, to the stage audit files."""
        header = audit_header(columns, self.with_site)
        for parts in unit_audits:
            for cat in sorted(parts):
                p = Path(parts[cat])
                text = p.read_text(encoding="utf-8")
                if text:
                    append_text(audit_path(self.run_dir, cat, table), text, header=header,
                                delimiter=",")
                p.unlink(missing_ok=True)

    def cleanup_tmp(self) -> None:
        shutil.rmtree(self.tmp_dir, ignore_errors=True)


def copy_passthrough(sources: Sequence[Source], dest: Path, delimiter: str = ",") -> int:
    """Copy an untouched table; a single source is copied byte for byte. Returns data rows."""
    from .ingest import count_rows, iter_rows

    dest.parent.mkdir(parents=True, exist_ok=True)
    if len(sources) == 1:
        shutil.copyfile(sources[0].path, dest)
        return count_rows(dest, delimiter)
    header = read_header(sources[0].path, delimiter)
    n = 0
    with open(dest, "w", encoding="utf-8", newline="") as out:
        out.write(rows_to_text([header], delimiter))
        for s in sources:
            h = read_header(s.path, delimiter)
            order = [h.index(c) for c in header] if h != header else None
            rows = []
            for row in iter_rows(s.path, delimiter):
                rows.append(row if order is None else [row[i] for i in order])
            out.write(rows_to_text(rows, delimiter))
            n += len(rows)
    return n
