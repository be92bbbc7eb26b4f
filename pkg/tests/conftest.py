from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pytest

from omoprep.engine import PipelineConfig, plan, run
from omoprep.ingest import TableChunk
from omoprep.schema import get_schema
from omoprep.synth import generate_corpus


def table_row(table: str, **values) -> List[str]:
    """A full-width row for ``table`` with the given columns set, others empty."""
    cols = get_schema(table).column_names
    unknown = set(values) - set(cols)
    assert not unknown, unknown
    return [str(values.get(c, "")) for c in cols]


def make_chunk(table: str, rows: Sequence[Sequence[str]], columns: Optional[Sequence[str]] = None,
               first_row: int = 0, index: int = 0, source: str = "mem.csv") -> TableChunk:
    schema = get_schema(table)
    return TableChunk(schema, list(columns or schema.column_names), [list(r) for r in rows], index,
                      (0, 0), first_row, source)


def write_table(directory: Path, table: str, rows: Sequence[Sequence[str]],
                columns: Optional[Sequence[str]] = None) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{table}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(columns or get_schema(table).column_names))
        w.writerows(rows)
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def run_pipeline(corpus: Path, run_dir: Path, stages=(1, 2, 3, 4, 5), **over) -> PipelineConfig:
    cfg = dict(input=str(corpus / "sites.json"), run_dir=str(run_dir), workers=2, chunk_rows=4000,
               crosswalk=str(corpus / "crosswalk.csv"),
               concept_dictionary=str(corpus / "concept_dictionary.csv"),
               tasks=str(corpus / "tasks.json"), stages=list(stages))
    cfg.update(over)
    config = PipelineConfig.from_dict(cfg)
    run(plan(config), config)
    return config


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("corpus")
    generate_corpus(out, n_sites=2, patients=400, seed=7)
    return out


@pytest.fixture(scope="session")
def small_run(small_corpus, tmp_path_factory) -> Path:
    run_dir = tmp_path_factory.mktemp("run") / "r"
    run_pipeline(small_corpus, run_dir)
    return run_dir
