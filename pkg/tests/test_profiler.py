import json
from datetime import datetime

import pytest
from hypothesis import given, strategies as st

from omoprep.profiler import (DistinctInts, KMVSketch, age_years, load_flagged_columns, profile_chunk,
                              profile_columns, profile_population, profile_table)

from conftest import make_chunk, table_row, write_table


def _obs_chunk(n, empty):
    rows = [table_row("OBSERVATION", observation_id=i + 1, person_id=1, observation_concept_id=5,
                      observation_date="2020-01-01", value_as_string="" if i < empty else "x")
            for i in range(n)]
    return make_chunk("OBSERVATION", rows)


def _col(profiles, name):
    return next(c for c in profiles if c.name == name)


def test_96_of_100_empty_is_flagged():
    c = _col(profile_columns([_obs_chunk(100, 96)]), "value_as_string")
    assert c.missing_fraction == pytest.approx(0.96)
    assert c.flagged_for_removal


def test_95_of_100_empty_is_not_flagged():
    c = _col(profile_columns([_obs_chunk(100, 95)]), "value_as_string")
    assert c.missing_fraction == pytest.approx(0.95)
    assert not c.flagged_for_removal


def test_fully_populated_column():
    c = _col(profile_columns([_obs_chunk(100, 0)]), "person_id")
    assert c.missing_fraction == 0.0 and not c.flagged_for_removal


def test_empty_table_convention():
    warnings = []
    cols = profile_columns([make_chunk("OBSERVATION", [])], warnings=warnings)
    assert cols and all(c.missing_fraction == 0.0 and not c.flagged_for_removal for c in cols)
    assert warnings


def test_missingness_is_exact_across_chunks():
    chunks = [_obs_chunk(37, 37), _obs_chunk(63, 0)]
    c = _col(profile_columns(chunks), "value_as_string")
    assert c.missing_fraction == pytest.approx(0.37)


def test_table_profile_counts():
    rows = [table_row("CONDITION_OCCURRENCE", condition_occurrence_id=i, person_id=p, condition_concept_id=9,
                      condition_start_date="2020-01-0%d" % (i + 1))
            for i, p in enumerate([1, 1, 2])]
    tp = profile_table([make_chunk("CONDITION_OCCURRENCE", rows)])
    assert tp.row_count == 3
    assert tp.unique_patient_count == 2
    assert tp.date_range == ["2020-01-01T00:00:00", "2020-01-03T00:00:00"]


def test_table_without_datetimes_has_no_range():
    rows = [table_row("LOCATION", location_id=1, city="x")]
    assert profile_table([make_chunk("LOCATION", rows)]).date_range is None


def test_partials_merge_commutatively():
    a, b = _obs_chunk(10, 3), _obs_chunk(20, 20)
    pa, pb = profile_chunk(a), profile_chunk(b)
    left, right = pa.merge(pb), pb.merge(pa)
    assert left.rows == right.rows == 30
    assert left.missing == right.missing


def _population(tmp_path, deaths=2, n=10):
    persons = [table_row("PERSON", person_id=i + 1, gender_concept_id=8507 if i % 2 else 8532, year_of_birth=2000,
                         month_of_birth=1, day_of_birth=1) for i in range(n)]
    death = [table_row("DEATH", person_id=i + 1, death_date="2021-01-01") for i in range(deaths)]
    vd = [table_row("VISIT_DETAIL", visit_detail_id=1, person_id=1, visit_detail_concept_id=581379,
                    visit_detail_start_date="2020-01-01", visit_detail_end_date="2020-01-02"),
          table_row("VISIT_DETAIL", visit_detail_id=2, person_id=3, visit_detail_concept_id=32037,
                    visit_detail_start_date="2020-01-01", visit_detail_end_date="2020-01-02"),
          table_row("VISIT_DETAIL", visit_detail_id=3, person_id=4, visit_detail_concept_id=8717,
                    visit_detail_start_date="2020-01-01", visit_detail_end_date="2020-01-02")]
    vo = [table_row("VISIT_OCCURRENCE", visit_occurrence_id=i + 1, person_id=i + 1, visit_concept_id=9201,
                    visit_start_date="2020-01-01", visit_end_date="2020-01-02") for i in range(n)]
    return (write_table(tmp_path, "PERSON", persons), write_table(tmp_path, "DEATH", death),
            write_table(tmp_path, "VISIT_DETAIL", vd), write_table(tmp_path, "VISIT_OCCURRENCE", vo))


def test_population_rates(tmp_path):
    person, death, vd, vo = _population(tmp_path)
    pop = profile_population(person, death, vd, vo)
    assert pop.person_count == 10
    assert pop.mortality_rate == pytest.approx(0.2)
    assert pop.icu_admission_rate == pytest.approx(0.2)
    assert sum(pop.gender_distribution.values()) == pytest.approx(1.0, abs=1e-9)
    assert sum(pop.age_at_first_visit_distribution.values()) == pytest.approx(1.0, abs=1e-9)
    assert pop.age_summary["median"] == pytest.approx(20.0, abs=0.01)


def test_missing_death_table_warns(tmp_path):
    person, _, vd, vo = _population(tmp_path)
    pop = profile_population(person, tmp_path / "nope.csv", vd, vo)
    assert pop.mortality_rate is None
    assert any("DEATH" in w for w in pop.warnings)


def test_age_formula():
    assert age_years(datetime(2000, 1, 1), datetime(2020, 1, 1)) == pytest.approx(20.0, abs=0.01)


def test_distinct_ints_spill_is_exact(tmp_path):
    d = DistinctInts(budget=50, tmpdir=tmp_path)
    for start in range(0, 1000, 100):
        d.update(range(start, start + 150))
    assert d.runs
    assert d.count() == 1050


def test_kmv_exact_below_k():
    s = KMVSketch(k=64)
    s.add_values([str(i) for i in range(50)] * 2)
    assert s.estimate() == 50


@given(fracs=st.lists(st.integers(0, 100), min_size=1, max_size=6),
       t1=st.floats(0.0, 1.0), t2=st.floats(0.0, 1.0))
def test_threshold_monotonicity(fracs, t1, t2):
    lo, hi = sorted((t1, t2))
    chunk = _obs_chunk(100, 0)
    cols = ["value_as_string", "observation_source_value", "unit_source_value", "qualifier_source_value",
            "observation_datetime", "value_as_number"][:len(fracs)]
    idx = [chunk.columns.index(c) for c in cols]
    for i, row in enumerate(chunk.rows):
        for k, f in zip(idx, fracs):
            row[k] = "" if i < f else "v"
    flagged_lo = {c.name for c in profile_columns([chunk], lo) if c.flagged_for_removal}
    flagged_hi = {c.name for c in profile_columns([chunk], hi) if c.flagged_for_removal}
    assert flagged_hi <= flagged_lo


def test_stage1_matches_generator_manifest(small_corpus, small_run):
    manifest = json.loads((small_corpus / "manifest.json").read_text())
    sites = manifest["sites"].values()
    for table in ("PERSON", "MEASUREMENT", "VISIT_DETAIL", "DEATH"):
        doc = json.loads((small_run / "stage1" / f"{table}_profile.json").read_text())
        assert doc["table_profile"]["row_count"] == sum(s["row_counts"][table] for s in sites)
    pop = json.loads((small_run / "stage1" / "population.json").read_text())
    patients = sum(s["realized"]["patients"] for s in sites)
    dead = sum(round(s["realized"]["deceased_fraction"] * s["realized"]["patients"]) for s in sites)
    icu = sum(round(s["realized"]["icu_fraction"] * s["realized"]["patients"]) for s in sites)
    assert pop["person_count"] == patients
    assert pop["mortality_rate"] == pytest.approx(dead / patients, abs=1e-12)
    assert pop["icu_admission_rate"] == pytest.approx(icu / patients, abs=1e-12)


def test_flags_round_trip_and_json_is_stable(small_run, small_corpus, tmp_path):
    flagged = load_flagged_columns(small_run)
    doc = json.loads((small_run / "stage1" / "MEASUREMENT_profile.json").read_text())
    assert flagged["MEASUREMENT"] == doc["flagged_columns"]
    from conftest import run_pipeline
    other = tmp_path / "again"
    run_pipeline(small_corpus, other, stages=(1,), workers=1)
    for p in sorted((small_run / "stage1").glob("*.json")):
        a = json.loads(p.read_text())
        b = json.loads((other / "stage1" / p.name).read_text())
        a.pop("generated_at"), b.pop("generated_at")
        assert a == b, p.name
