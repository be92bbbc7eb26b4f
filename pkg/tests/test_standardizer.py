import json
from datetime import datetime, timedelta

import pytest
from hypothesis import given, settings, strategies as st

from omoprep.standardizer import (ORIG_UNIT, ORIG_VALUE, MeasurementUnits, UnitRule, UnitRuleSet,
                                  VisitInterval, apply_plausibility, build_digests, compute_cutoffs,
                                  convert_unit, filter_outliers, load_unit_rules, merge_visits,
                                  normalize_types)

from conftest import make_chunk, read_csv, table_row

RULES = UnitRuleSet(load_unit_rules())
T0 = datetime(2020, 1, 1)


def _rule(src):
    return RULES.conversion(None, src)


def test_fahrenheit_to_celsius():
    v, u = convert_unit(98.6, _rule("[degF]"))
    assert v == pytest.approx(37.0, rel=1e-12) and u == "Cel"


def test_pounds_to_kilograms():
    v, u = convert_unit(154.324, _rule("[lb_av]"))
    assert v == pytest.approx(70.0, rel=1e-5) and u == "kg"
    assert _rule("lb").a == 0.45359237


def test_inches_to_centimetres():
    v, u = convert_unit(70, _rule("in"))
    assert v == pytest.approx(177.8, rel=1e-12) and u == "cm"


def test_synonyms_are_case_insensitive():
    assert _rule("°F") is _rule("F") is _rule("degf")
    assert RULES.conversion(None, "Cel") is None


def test_plausibility_bounds():
    temp = RULES.bounds(None, "Cel")
    assert (temp.lo, temp.hi) == (25, 45)
    assert apply_plausibility(55.0, temp).startswith("above_hi")
    assert apply_plausibility(37.0, temp) is None
    assert apply_plausibility(25.0, temp) is None
    assert apply_plausibility(24.999, temp).startswith("below_lo")


def test_rule_invariants():
    with pytest.raises(ValueError):
        UnitRule(None, "a", 0.0, 0.0, "b")
    with pytest.raises(ValueError):
        UnitRule(None, "a", 1.0, 0.0, "b", lo=5, hi=5)


def _meas(i, concept, value, unit, person=1, t="2020-01-01T08:00:00"):
    return table_row("MEASUREMENT", measurement_id=i, person_id=person, measurement_concept_id=concept,
                     measurement_date=t[:10], measurement_datetime=t, value_as_number=value,
                     unit_source_value=unit)


def test_row_conversion_keeps_provenance():
    mu = MeasurementUnits(make_chunk("MEASUREMENT", []).columns, RULES)
    out, converted, why = mu.apply(_meas(1, 4000001, "98.6", "F"))
    cols = mu.out_columns
    assert converted and why is None
    assert float(out[cols.index("value_as_number")]) == pytest.approx(37.0)
    assert out[cols.index("unit_source_value")] == "Cel"
    assert out[cols.index(ORIG_VALUE)] == "98.6" and out[cols.index(ORIG_UNIT)] == "F"
    # converting again is a no-op
    again, converted2, _ = MeasurementUnits(cols, RULES).apply(out)
    assert not converted2 and again == out


def test_row_plausibility_after_conversion():
    mu = MeasurementUnits(make_chunk("MEASUREMENT", []).columns, RULES)
    _, converted, why = mu.apply(_meas(1, 4000001, "131", "degF"))  # 55 C
    assert converted and why.startswith("above_hi")


def test_outlier_band_on_1_to_1000():
    digests = build_digests((7, float(v)) for v in range(1, 1001))
    cutoffs = compute_cutoffs(digests)
    rows = [_meas(v, 7, v, "mg") for v in range(1, 1001)]
    kept, removed = filter_outliers(make_chunk("MEASUREMENT", rows), cutoffs)
    assert len(kept) / 1000 == pytest.approx(0.98, abs=0.005)
    assert all(e.stage == "outlier" for e in removed)


def test_outlier_exemptions():
    digests = build_digests([(5, float(v)) for v in range(5)] + [(7, float(v)) for v in range(1000)])
    cutoffs = compute_cutoffs(digests, n_min=100)
    assert 5 not in cutoffs and 7 in cutoffs
    rows = [_meas(1, 5, 10_000, "mg"), _meas(2, 7, "", "mg")]
    kept, removed = filter_outliers(make_chunk("MEASUREMENT", rows), cutoffs)
    assert len(kept) == 2 and not removed


def test_cutoffs_reject_bad_quantiles():
    with pytest.raises(ValueError):
        compute_cutoffs({}, 0.9, 0.1)


@settings(max_examples=40, deadline=None)
@given(values=st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=100, max_size=600))
def test_outlier_removal_is_bounded(values):
    cut = compute_cutoffs(build_digests((1, v) for v in values))[1]
    rows = [_meas(i, 1, repr(v), "mg") for i, v in enumerate(values)]
    kept, removed = filter_outliers(make_chunk("MEASUREMENT", rows), {1: cut})
    assert len(kept) + len(removed) == len(values)
    # at most the two 1% tails plus the sketch's slack
    assert len(removed) <= 0.02 * len(values) + 4


def _v(i, start_h, end_h):
    return VisitInterval(i, T0 + timedelta(hours=start_h), T0 + timedelta(hours=end_h))


def test_merge_gap_within_window():
    eps, _ = merge_visits(1, [_v(1, 8, 9), _v(2, 10.5, 11)])
    assert [(e.start, e.end, e.constituents) for e in eps] == [(T0 + timedelta(hours=8), T0 + timedelta(hours=11),
                                                                 [1, 2])]


def test_merge_gap_beyond_window():
    eps, _ = merge_visits(1, [_v(1, 8, 9), _v(2, 11.5, 12)])
    assert len(eps) == 2


def test_chain_of_fragments():
    eps, _ = merge_visits(1, [_v(i, 2 * i, 2 * i + 1) for i in range(5)])
    assert len(eps) == 1 and eps[0].constituents == [0, 1, 2, 3, 4]


def test_missing_start_left_unmerged():
    eps, undated = merge_visits(1, [_v(1, 8, 9), VisitInterval(2, None, T0)])
    assert len(eps) == 1 and [v.visit_id for v in undated] == [2]


_visits = st.lists(st.tuples(st.integers(0, 200), st.integers(0, 12)), max_size=15)


@settings(max_examples=200, deadline=None)
@given(spec=_visits)
def test_visit_merge_invariants(spec):
    visits = [_v(i, s, s + d) for i, (s, d) in enumerate(spec)]
    eps, _ = merge_visits(1, visits)
    window = timedelta(hours=2)
    by_id = {v.visit_id: v for v in visits}
    assert sorted(c for e in eps for c in e.constituents) == sorted(by_id)
    for e in eps:
        assert e.end >= e.start
        for c in e.constituents:
            assert e.start <= by_id[c].start and by_id[c].end <= e.end
    for a, b in zip(eps, eps[1:]):
        assert b.start - a.end > window
    # idempotence: merging the episodes changes nothing
    again, _ = merge_visits(1, [VisitInterval(e.episode_id, e.start, e.end) for e in eps])
    assert [(e.start, e.end) for e in again] == [(e.start, e.end) for e in eps]


def test_normalize_types():
    row = table_row("MEASUREMENT", measurement_id="0012", person_id="007", measurement_concept_id="5",
                    measurement_date="2020-01-01", measurement_datetime="2020-01-01 08:00:00",
                    value_as_number="", range_low="1e1")
    out = normalize_types(make_chunk("MEASUREMENT", [row])).rows[0]
    cols = make_chunk("MEASUREMENT", []).columns
    assert out[cols.index("measurement_datetime")] == "2020-01-01T08:00:00"
    assert out[cols.index("measurement_id")] == "12"
    assert out[cols.index("person_id")] == "7"
    assert out[cols.index("value_as_number")] == ""
    assert out[cols.index("range_low")] == "10.0"


def test_stage4_outputs(small_run):
    stats = json.loads((small_run / "stage4" / "outlier_stats.json").read_text())
    assert stats["q_lo"] == 0.01 and stats["q_hi"] == 0.99 and not stats["frozen"]
    assert all(c["n"] >= 100 for c in stats["cutoffs"].values())
    rows = read_csv(small_run / "stage4" / "MEASUREMENT.csv")
    for r in rows:
        if r["measurement_concept_id"] == "4000001" and r["value_as_number"]:
            assert r["unit_source_value"] == "Cel"
            assert 25 <= float(r["value_as_number"]) <= 45
    converted = read_csv(small_run / "audit" / "unit_converted" / "MEASUREMENT.csv")
    assert converted and {r["__action"] for r in converted} == {"rewritten"}


def test_stage4_visit_episodes_separated(small_run):
    # episodes are formed per person and care setting
    rows = read_csv(small_run / "stage4" / "VISIT_DETAIL.csv")
    per = {}
    for r in rows:
        per.setdefault((r["person_id"], r["visit_detail_concept_id"]), []).append((datetime.fromisoformat(r["visit_detail_start_datetime"]),
                                                    datetime.fromisoformat(r["visit_detail_end_datetime"])))
    for spans in per.values():
        spans.sort()
        for (_, e1), (s2, _) in zip(spans, spans[1:]):
            assert s2 - e1 > timedelta(hours=2)
    assert read_csv(small_run / "audit" / "visit_merged" / "VISIT_DETAIL.csv")
