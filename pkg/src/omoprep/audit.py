"""Audit trail and run ledger.

Every row a stage removes or rewrites is archived under
``audit/<category>/<TABLE>.csv`` with its original columns followed by the
bookkeeping columns below. The ledger keeps per-stage, per-table counters and
checks the conservation law ``rows_in == rows_out + rows_removed``.
"""

from __future__ import annotations

import json
import time
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

from .ingest import append_text, rows_to_text

CLEAN_INVALID = "clean_invalid"
CLEAN_DUPLICATE = "clean_duplicate"
CLEAN_TEMPORAL = "clean_temporal"
MAP_UNMAPPED = "map_unmapped"
MAP_DUPLICATE = "map_duplicate"
OUTLIER = "outlier"
IMPLAUSIBLE = "implausible"
UNIT_CONVERTED = "unit_converted"
VISIT_MERGED = "visit_merged"

CATEGORIES = (CLEAN_INVALID, CLEAN_DUPLICATE, CLEAN_TEMPORAL, MAP_UNMAPPED, MAP_DUPLICATE,
              OUTLIER, IMPLAUSIBLE, UNIT_CONVERTED, VISIT_MERGED)

REMOVED = "removed"
REWRITTEN = "rewritten"
LOGGED = "logged"

STAGES = ("stage1", "stage2", "stage3", "stage4", "stage5")
STAGE_CATEGORIES = {
    "stage2": (CLEAN_INVALID, CLEAN_DUPLICATE, CLEAN_TEMPORAL),
    "stage3": (MAP_UNMAPPED, MAP_DUPLICATE),
    "stage4": (UNIT_CONVERTED, IMPLAUSIBLE, OUTLIER, VISIT_MERGED),
}

AUDIT_COLUMNS = ["__stage", "__action", "__reason", "__source_file", "__source_row"]


@dataclass
class AuditEntry:
    stage: str  # one of CATEGORIES
    table_name: str
    source_file: str
    source_row: int
    person_id: Optional[int]
    reason: str
    original: List[str]
    action: str = REMOVED
    site_id: Optional[str] = None

    def to_row(self, with_site: bool = False) -> List[str]:
        row = list(self.original) + [self.stage, self.action, self.reason,
                                     self.source_file, str(self.source_row)]
        if with_site:
            row.append(self.site_id or "")
        return row


def audit_header(columns: Sequence[str], with_site: bool = False) -> List[str]:
    return list(columns) + AUDIT_COLUMNS + (["site_id"] if with_site else [])


def audit_path(run_dir, category: str, table: str) -> Path:
    return Path(run_dir) / "audit" / category / f"{table}.csv"


def write_audit(entries: Sequence[AuditEntry], run_dir, columns: Sequence[str],
                with_site: bool = False) -> Optional[Path]:
    """Append ``entries`` to their per-(category, table) audit files.

    Each file receives its rows in one append, so an interruption between
    chunks never leaves a partial row. Returns the last path written, or None
    when there was nothing to write.
    """
    if not entries:
        return None
    grouped: Dict[tuple, List[AuditEntry]] = defaultdict(list)
    for e in entries:
        if e.stage not in CATEGORIES:
            raise ValueError(f"unknown audit category {e.stage!r}")
        grouped[(e.stage, e.table_name)].append(e)
    path = None
    for (cat, table), group in grouped.items():
        path = audit_path(run_dir, cat, table)
        text = rows_to_text([e.to_row(with_site) for e in group])
        append_text(path, text, header=audit_header(columns, with_site))
    return path


def read_audit_counts(run_dir) -> Dict[tuple, Counter]:
    """{(category, table): Counter(action -> rows)} recounted from audit files."""
    import csv

    out: Dict[tuple, Counter] = {}
    root = Path(run_dir) / "audit"
    if not root.is_dir():
        return out
    for cat_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(cat_dir.glob("*.csv")):
            c: Counter = Counter()
            with open(f, newline="", encoding="utf-8") as fh:
                reader = csv.reader(fh)
                header = next(reader, None) or []
                try:
                    ai = header.index("__action")
                except ValueError:
                    continue
                for row in reader:
                    if len(row) > ai:
                        c[row[ai]] += 1
            out[(cat_dir.name, f.stem)] = c
    return out


@dataclass
class TableCounts:
    rows_in: int = 0
    rows_out: int = 0
    removed: Counter = field(default_factory=Counter)
    rewritten: Counter = field(default_factory=Counter)
    logged: Counter = field(default_factory=Counter)

    @property
    def rows_removed(self) -> int:
        return sum(self.removed.values())

    def conserved(self) -> bool:
        return self.rows_in == self.rows_out + self.rows_removed

    def merge(self, other: "TableCounts") -> None:
        self.rows_in += other.rows_in
        self.rows_out += other.rows_out
        self.removed.update(other.removed)
        self.rewritten.update(other.rewritten)
        self.logged.update(other.logged)

    def to_dict(self) -> dict:
        return {
            "rows_in": self.rows_in,
            "rows_out": self.rows_out,
            "rows_removed": self.rows_removed,
            "removed_by_reason": dict(sorted(self.removed.items())),
            "rows_rewritten": dict(sorted(self.rewritten.items())),
            "rows_logged": dict(sorted(self.logged.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TableCounts":
        return cls(d["rows_in"], d["rows_out"], Counter(d.get("removed_by_reason", {})),
                   Counter(d.get("rows_rewritten", {})), Counter(d.get("rows_logged", {})))


@dataclass
class StageRecord:
    tables: Dict[str, TableCounts] = field(default_factory=dict)
    status: str = "pending"  # pending | complete | failed | skipped
    wall_seconds: float = 0.0
    error: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def table(self, name: str) -> TableCounts:
        if name not in self.tables:
            self.tables[name] = TableCounts()
        return self.tables[name]


class RunLedger:
    """Per-stage counters. Workers fill their own TableCounts and the
    coordinator merges them, so totals do not depend on interleaving."""

    def __init__(self, config: Optional[dict] = None):
        self.config = dict(config or {})
        self.stages: Dict[str, StageRecord] = {s: StageRecord() for s in STAGES}
        self.started = time.time()
        self.metrics: dict = {}

    def stage(self, name: str) -> StageRecord:
        return self.stages[name]

    def merge_counts(self, stage: str, table: str, counts: TableCounts) -> None:
        self.stage(stage).table(table).merge(counts)

    def conservation(self) -> List[dict]:
        out = []
        for sname, rec in self.stages.items():
            for tname, c in sorted(rec.tables.items()):
                out.append({"stage": sname, "table": tname, "rows_in": c.rows_in,
                            "rows_out": c.rows_out, "rows_removed": c.rows_removed,
                            "pass": c.conserved()})
        return out

    def to_dict(self) -> dict:
        cons = self.conservation()
        return {
            "config": self.config,
            "stages": {
                s: {
                    "status": r.status,
                    "wall_seconds": round(r.wall_seconds, 6),
                    "error": r.error,
                    "tables": {t: c.to_dict() for t, c in sorted(r.tables.items())},
                    **({"extra": r.extra} if r.extra else {}),
                }
                for s, r in self.stages.items()
            },
            "conservation": {"pass": all(c["pass"] for c in cons), "checks": cons},
            "metrics": self.metrics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunLedger":
        led = cls(d.get("config"))
        for s, rd in d.get("stages", {}).items():
            rec = StageRecord(status=rd.get("status", "pending"),
                              wall_seconds=rd.get("wall_seconds", 0.0), error=rd.get("error"),
                              extra=rd.get("extra", {}))
            rec.tables = {t: TableCounts.from_dict(c) for t, c in rd.get("tables", {}).items()}
            led.stages[s] = rec
        led.metrics = d.get("metrics", {})
        return led


def finalize_ledger(ledger: RunLedger, run_dir) -> Path:
    """Write ``run_report.json`` with counters, config, timings and the conservation verdict."""
    path = Path(run_dir) / "run_report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = ledger.to_dict()
    doc["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%S")
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")
    return path


def load_ledger(run_dir) -> RunLedger:
    return RunLedger.from_dict(json.loads((Path(run_dir) / "run_report.json").read_text()))
