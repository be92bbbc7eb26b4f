import json
from collections import Counter

import pytest
from hypothesis import given, settings, HealthCheck, strategies as st

from omoprep.audit import (AuditEntry, CLEAN_DUPLICATE, RunLedger, TableCounts, audit_path,
                           finalize_ledger, load_ledger, write_audit)
from omoprep.cleaner import clean_chunks
from omoprep.ingest import HeaderError, index_chunks, iter_rows, live_rows, stream_chunks
from omoprep.schema import get_schema
from omoprep.synth import generate_bulk_measurements

from conftest import table_row, write_table

MEAS = get_schema("MEASUREMENT")


def _meas_rows(n):
    return [table_row("MEASUREMENT", measurement_id=i + 1, person_id=1 + i % 3, measurement_concept_id=3004249,
                      measurement_date="2020-01-01", measurement_datetime=f"2020-01-01T08:{i % 60:02d}:00",
                      value_as_number=i)
            for i in range(n)]


def test_chunk_sizes(tmp_path):
    p = write_table(tmp_path, "MEASUREMENT", _meas_rows(10))
    chunks = list(stream_chunks(p, MEAS, 4))
    assert [len(c) for c in chunks] == [4, 4, 2]
    assert [c.chunk_index for c in chunks] == [0, 1, 2]
    assert [c.first_row for c in chunks] == [0, 4, 8]


def test_empty_table_yields_nothing(tmp_path):
    p = write_table(tmp_path, "MEASUREMENT", [])
    assert list(stream_chunks(p, MEAS, 4)) == []
    assert index_chunks(p, 4) == []


def test_missing_file_and_bad_header(tmp_path):
    with pytest.raises(FileNotFoundError):
        list(stream_chunks(tmp_path / "MEASUREMENT.csv", MEAS, 4))
    p = write_table(tmp_path, "MEASUREMENT", [["1", "2"]], columns=["measurement_id", "value_as_number"])
    with pytest.raises(HeaderError):
        list(stream_chunks(p, MEAS, 4))


def test_malformed_rows_are_carried_not_dropped(tmp_path):
    rows = _meas_rows(3)
    p = write_table(tmp_path, "MEASUREMENT", rows)
    with open(p, "a") as fh:
        fh.write("99,1,2\n")
    chunks = list(stream_chunks(p, MEAS, 10))
    assert len(chunks[0]) == 3
    assert chunks[0].malformed == [(3, ["99", "1", "2"])]


def test_million_rows_peak_resident_bound(tmp_path):
    p = generate_bulk_measurements(tmp_path / "MEASUREMENT.csv", 1_000_000, seed=3)
    live_rows.reset()
    sizes = []
    for chunk in stream_chunks(p, MEAS, 100_000):
        sizes.append(len(chunk))
        del chunk  # the consumer keeps nothing; the stream itself holds one chunk
    assert sizes == [100_000] * 10
    assert live_rows.peak <= 100_000


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(n=st.integers(0, 60), k=st.integers(1, 25),
       notes=st.lists(st.text(alphabet='ab,"\n x', max_size=6), min_size=60, max_size=60))
def test_streaming_order_stability(tmp_path, n, k, notes):
    rows = _meas_rows(n)
    vi = MEAS.column_names.index("value_source_value")
    for r, note in zip(rows, notes):
        r[vi] = note
    p = write_table(tmp_path, "MEASUREMENT", rows)
    whole = list(iter_rows(p))
    chunks = list(stream_chunks(p, MEAS, k))
    assert [r for c in chunks for r in c.rows] == whole
    spans = index_chunks(p, k)
    assert [s.first_row for s in spans] == [c.first_row for c in chunks]
    assert all(len(c) == k for c in chunks[:-1])


def _entry(i, cat=CLEAN_DUPLICATE):
    row = _meas_rows(i + 1)[i]
    return AuditEntry(cat, "MEASUREMENT", "x.csv", i, 1, "duplicate_of:x.csv:0", row)


def test_write_audit_appends_rows(tmp_path):
    path = write_audit([_entry(i) for i in range(3)], tmp_path, MEAS.column_names)
    assert path == audit_path(tmp_path, "clean_duplicate", "MEASUREMENT")
    assert path == tmp_path / "audit" / "clean_duplicate" / "MEASUREMENT.csv"
    assert len(list(iter_rows(path))) == 3
    write_audit([_entry(3)], tmp_path, MEAS.column_names)
    rows = list(iter_rows(path))
    assert len(rows) == 4
    header = next(iter(open(path))).strip().split(",")
    assert header[-5:] == ["__stage", "__action", "__reason", "__source_file", "__source_row"]


def test_write_audit_empty_creates_nothing(tmp_path):
    assert write_audit([], tmp_path, MEAS.column_names) is None
    assert not (tmp_path / "audit").exists()


def test_write_audit_rejects_unknown_category(tmp_path):
    with pytest.raises(ValueError):
        write_audit([_entry(0, cat="bogus")], tmp_path, MEAS.column_names)


def test_finalize_ledger_conservation(tmp_path):
    led = RunLedger({"seed": 1})
    led.merge_counts("stage2", "MEASUREMENT", TableCounts(100, 97, Counter(clean_invalid=3)))
    led.stage("stage2").status = "complete"
    path = finalize_ledger(led, tmp_path)
    doc = json.loads(path.read_text())
    assert doc["conservation"]["pass"] is True
    assert set(doc["stages"]) == {"stage1", "stage2", "stage3", "stage4", "stage5"}

    led.merge_counts("stage2", "OBSERVATION", TableCounts(100, 96, Counter(clean_invalid=3)))
    doc = json.loads(finalize_ledger(led, tmp_path).read_text())
    assert doc["conservation"]["pass"] is False
    bad = [c for c in doc["conservation"]["checks"] if not c["pass"]]
    assert [(c["stage"], c["table"]) for c in bad] == [("stage2", "OBSERVATION")]
    again = load_ledger(tmp_path)
    assert again.stage("stage2").table("MEASUREMENT").rows_removed == 3


def test_recovery_multiset(tmp_path):
    """Cleaned rows plus audited originals reproduce the input multiset."""
    rows = _meas_rows(30)
    rows[3][2] = "0"
    rows[7] = list(rows[6])          # duplicate
    rows[9][4] = "2091-01-01T00:00:00"  # future
    rows.append(["1", "2"])          # malformed
    p = write_table(tmp_path, "MEASUREMENT", rows)
    from datetime import datetime
    kept, entries = clean_chunks(stream_chunks(p, MEAS, 7), datetime(2025, 1, 1))
    write_audit(entries, tmp_path / "run", MEAS.column_names)
    restored = [tuple(r) for c in kept for r in c.rows]
    for cat in ("clean_invalid", "clean_duplicate", "clean_temporal"):
        for r in iter_rows(audit_path(tmp_path / "run", cat, "MEASUREMENT")):
            orig = r[:len(MEAS.column_names)]
            restored.append(tuple(orig))
    expected = [tuple(r) for r in rows[:-1]] + [tuple(["1", "2"] + [""] * (len(MEAS.column_names) - 2))]
    assert Counter(restored) == Counter(expected)
