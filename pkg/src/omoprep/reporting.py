"""Figures and delimited summaries for a finished run, written to ``<run_dir>/report/``."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .audit import load_ledger  # noqa: E402

STYLE = {"figure.dpi": 110, "font.size": 9, "axes.spines.top": False, "axes.spines.right": False}


def _write_csv(path: Path, header: List[str], rows: List[list]) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def stage_flow(run_dir: Path, out: Path) -> List[Path]:
    ledger = load_ledger(run_dir)
    rows = []
    for stage, rec in ledger.stages.items():
        for table, c in sorted(rec.tables.items()):
            rows.append([stage, table, c.rows_in, c.rows_out, c.rows_removed, rec.wall_seconds])
    files = [_write_csv(out / "stage_flow.csv",
                        ["stage", "table", "rows_in", "rows_out", "rows_removed", "stage_wall_seconds"], rows)]
    stages = [s for s, r in ledger.stages.items() if r.tables and s != "stage1"]
    if not stages:
        return files
    kept = [sum(c.rows_out for c in ledger.stage(s).tables.values()) for s in stages]
    removed = [sum(c.rows_removed for c in ledger.stage(s).tables.values()) for s in stages]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.2))
        ax.bar(stages, kept, label="rows out", color="#4c72b0")
        ax.bar(stages, removed, bottom=kept, label="rows removed", color="#dd8452")
        ax.set_ylabel("rows")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out / "stage_flow.png")
        plt.close(fig)
    return files + [out / "stage_flow.png"]


def vocabulary_shares(run_dir: Path, out: Path) -> List[Path]:
    path = run_dir / "stage3" / "mapping_stats.json"
    if not path.exists():
        return []
    doc = json.loads(path.read_text())
    rows = []
    for table, st in sorted(doc.get("tables", {}).items()):
        n = st.get("rows_in", 0)
        if not n:
            continue
        for vocab, c in sorted(st.get("by_vocabulary", {}).items()):
            rows.append([table, vocab, sum(c.values()) / n, c.get("unmapped", 0) / n])
    files = [_write_csv(out / "vocabulary_shares.csv", ["table", "source_vocabulary", "share_before",
                                                        "share_unmapped_after"], rows)]
    tables = sorted({r[0] for r in rows})
    if not tables:
        return files
    vocabs = sorted({r[1] for r in rows})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(7, 0.5 + 0.55 * len(tables)))
        left = [0.0] * len(tables)
        cmap = plt.get_cmap("tab10")
        for k, v in enumerate(vocabs):
            widths = [next((r[2] for r in rows if r[0] == t and r[1] == v), 0.0) for t in tables]
            ax.barh(tables, widths, left=left, color=cmap(k % 10), label=v)
            left = [a + b for a, b in zip(left, widths)]
        after = [1.0 - sum(r[3] for r in rows if r[0] == t) for t in tables]
        ax.scatter(after, tables, marker="|", s=300, color="black", label="SNOMED after mapping", zorder=3)
        ax.set_xlim(0, 1)
        ax.set_xlabel("share of rows")
        ax.legend(frameon=False, fontsize=7, ncol=4, loc="upper center", bbox_to_anchor=(0.5, -0.25))
        fig.tight_layout()
        fig.savefig(out / "vocabulary_shares.png", bbox_inches="tight")
        plt.close(fig)
    return files + [out / "vocabulary_shares.png"]


def outlier_cutoffs(run_dir: Path, out: Path, top: int = 20) -> List[Path]:
    path = run_dir / "stage4" / "outlier_stats.json"
    if not path.exists():
        return []
    doc = json.loads(path.read_text())
    cut = doc.get("cutoffs", {})
    rows = [[c, v["n"], v["lo"], v["hi"], v.get("removed", 0), v.get("kept_fraction")] for c, v in cut.items()]
    rows.sort(key=lambda r: (-r[1], int(r[0])))
    files = [_write_csv(out / "outlier_cutoffs.csv", ["concept_id", "n", "lo", "hi", "removed", "kept_fraction"],
                        rows)]
    shown = rows[:top]
    if not shown:
        return files
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 0.4 + 0.25 * len(shown)))
        labels = [str(r[0]) for r in shown]
        ax.hlines(labels, [r[2] for r in shown], [r[3] for r in shown], color="#4c72b0", lw=3)
        ax.set_xscale("symlog")
        ax.set_xlabel(f"kept band [q{doc.get('q_lo')}, q{doc.get('q_hi')}]")
        ax.invert_yaxis()
        fig.tight_layout()
        fig.savefig(out / "outlier_cutoffs.png")
        plt.close(fig)
    return files + [out / "outlier_cutoffs.png"]


def render_report(run_dir) -> List[Path]:
    """All figures with their CSV tables; sections without inputs are skipped."""
    run_dir = Path(run_dir)
    out = run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    files: List[Path] = []
    for fn in (stage_flow, vocabulary_shares, outlier_cutoffs):
        files.extend(fn(run_dir, out))
    return files
