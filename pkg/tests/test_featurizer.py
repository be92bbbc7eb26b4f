import json
import math
from datetime import datetime, timedelta

import numpy as np
import pytest

from omoprep.extractor import IcuStay, load_bundle
from omoprep.featurizer import (QUOTAS, ConfigError, Event, FeatureVocabulary, LeakageError, build_feature_row,
                                bundle_death, bundle_sepsis, check_leakage, default_tasks, export_dataset,
                                feature_columns, label_los, label_mortality, label_readmission, label_sepsis,
                                label_stay, load_tasks, patient_dirs_with_stays, run_featurize, split_persons,
                                top_k)
from omoprep.parallel import Pool

from conftest import read_csv

T0 = datetime(2020, 3, 1, 6)
H = timedelta(hours=1)
D = timedelta(days=1)
TASKS = default_tasks()


def _stay(start_h=0.0, hours=96.0):
    s = T0 + start_h * H
    return IcuStay(1, s, s + hours * H, [1], 581379)


def test_top_k_by_frequency():
    assert top_k({1: 100, 2: 50, 3: 10}, 2) == [1, 2]


def test_top_k_tie_goes_to_lower_id():
    assert top_k({9: 50, 4: 50}, 1) == [4]


def test_vocabulary_shortfall_reported():
    v = FeatureVocabulary({"MEASUREMENT": [1, 2]}, {"MEASUREMENT": 400, "OBSERVATION": 200})
    assert v.shortfall == {"MEASUREMENT": 398, "OBSERVATION": 200}


def test_quotas_total_800():
    assert dict(QUOTAS) == {"MEASUREMENT": 400, "OBSERVATION": 200, "DRUG_EXPOSURE": 100,
                            "CONDITION_OCCURRENCE": 50, "PROCEDURE_OCCURRENCE": 50}
    assert sum(q for _, q in QUOTAS) == 800


def _vocab():
    return FeatureVocabulary({"MEASUREMENT": [7], "CONDITION_OCCURRENCE": [9]},
                             {"MEASUREMENT": 1, "CONDITION_OCCURRENCE": 1})


def test_binning_single_value():
    row, latest = build_feature_row([Event("MEASUREMENT", 7, T0 + 5 * H, 10.0)], _vocab(), (T0, T0 + 24 * H), 6)
    means, counts = row[0:12:2], row[1:12:2]
    assert means[1] == 10.0 and counts[1] == 1
    assert all(math.isnan(m) for i, m in enumerate(means) if i != 1)
    assert latest == T0 + 5 * H


def test_binning_mean_of_two():
    ev = [Event("MEASUREMENT", 7, T0 + H, 8.0), Event("MEASUREMENT", 7, T0 + 2 * H, 12.0)]
    row, _ = build_feature_row(ev, _vocab(), (T0, T0 + 24 * H), 6)
    assert row[0] == 10.0 and row[1] == 2


def test_window_end_is_excluded():
    ev = [Event("MEASUREMENT", 7, T0 + 24 * H, 1.0), Event("CONDITION_OCCURRENCE", 9, T0 + 24 * H)]
    row, latest = build_feature_row(ev, _vocab(), (T0, T0 + 24 * H), 6)
    assert latest is None and np.nansum(row) == 0


def test_feature_column_layout():
    cols = feature_columns(_vocab(), 6)
    assert len(cols) == 6 * 2 + 6
    assert cols[0] == "MEASUREMENT:7:b0:mean" and cols[-1] == "CONDITION_OCCURRENCE:9:b5:count"


def test_bin_counts_per_task():
    assert TASKS["los_gt3d"].n_bins == 6 and TASKS["mortality_7d"].n_bins == 12
    for t in TASKS.values():
        assert t.gap == 48 * H


def test_mortality_labels():
    stay = _stay()
    assert label_mortality(stay, T0 + 5 * D, 7 * D) == 1
    assert label_mortality(stay, T0 + 20 * D, 7 * D) == 0
    assert label_mortality(stay, T0 + 20 * D, 30 * D) == 1
    assert label_mortality(stay, None, 30 * D) == 0


def test_los_labels():
    assert label_los(_stay(hours=72), 3 * D) == 0
    assert label_los(_stay(hours=8 * 24), 3 * D) == 1 and label_los(_stay(hours=8 * 24), 7 * D) == 1
    assert label_los(_stay(hours=30), 3 * D) == 0


def test_readmission_labels():
    first = _stay(0, 72)
    assert label_readmission([first, _stay(72 + 5 * 24, 10)], 0, 7 * D) == 1
    inside_gap = [first, _stay(72 + 24, 10)]
    assert all(label_readmission(inside_gap, 0, h * D) == 0 for h in (7, 30, 90))
    assert label_readmission([first], 0, 90 * D) == 0


def test_sepsis_labels():
    stay = _stay()
    start = TASKS["sepsis_48h"].prediction_start(stay)
    assert start == stay.start
    assert label_sepsis(stay, [T0 + 30 * H], start, 48 * H) == 1
    assert label_sepsis(stay, [T0 + 6 * D], start, 48 * H) == 0
    assert label_sepsis(stay, [T0 + 6 * D], start, 7 * D) == 1
    assert all(label_sepsis(stay, [], start, h) == 0 for h in (None, 48 * H, 7 * D))


def test_cohort_exclusions():
    short = [_stay(hours=40)]
    assert label_stay(TASKS["mortality_7d"], short, 0, None, []) == (None, "short_stay")
    label, why = label_stay(TASKS["sepsis_48h"], [_stay()], 0, None, [T0 - 10 * H])
    assert label is None and why == "sepsis_before_prediction_window"
    assert label_stay(TASKS["los_gt3d"], [_stay(hours=100)], 0, None, []) == (1, "")


def test_prediction_window_follows_gap():
    stay = _stay(hours=200)
    for t in TASKS.values():
        _, obs_end = t.observation(stay)
        assert t.prediction_start(stay) >= obs_end + t.gap


def test_empty_sepsis_set_is_a_config_error(tmp_path):
    p = tmp_path / "tasks.json"
    p.write_text(json.dumps({"sepsis_concept_ids": []}))
    with pytest.raises(ConfigError):
        load_tasks(p)
    with pytest.raises(ConfigError):
        run_featurize(tmp_path, TASKS, [], 0)


def test_leakage_guard():
    start = T0 + 96 * H
    check_leakage(T0 + 47 * H, start)
    check_leakage(None, start)
    with pytest.raises(LeakageError):
        check_leakage(T0 + 48 * H, start)


def test_split_100_persons():
    train, test, folds = split_persons(list(range(1, 101)), seed=3)
    assert len(train) == 80 and len(test) == 20 and not set(train) & set(test)
    assert set(folds) == set(train) and set(folds.values()) == set(range(5))
    assert split_persons(list(range(1, 101)), seed=3) == (train, test, folds)


def test_split_too_small():
    with pytest.raises(ValueError):
        split_persons([1, 2, 3], seed=0)


def test_export_is_person_level_and_deterministic(tmp_path):
    rows = []
    for p in range(1, 41):
        rows.append((p, T0, 0, p % 2, np.array([1.0, np.nan])))
        if p % 3 == 0:
            rows.append((p, T0 + 30 * D, 1, 0, np.array([2.0, 3.0])))
    for name in ("a", "b"):
        export_dataset("t", rows, ["x", "y"], tmp_path / name, seed=9)
    for f in ("train.csv", "test.csv", "folds.json"):
        assert (tmp_path / "a" / "t" / f).read_bytes() == (tmp_path / "b" / "t" / f).read_bytes()
    train = read_csv(tmp_path / "a" / "t" / "train.csv")
    test = read_csv(tmp_path / "a" / "t" / "test.csv")
    assert not {r["person_id"] for r in train} & {r["person_id"] for r in test}
    assert len(train) + len(test) == len(rows)
    assert any(r["y"] == "" for r in train + test)


@pytest.fixture(scope="module")
def featurized(small_corpus, small_run):
    tasks, sepsis, seed = load_tasks(small_corpus / "tasks.json")
    with Pool(2) as pool:
        summary = run_featurize(small_run, tasks, sepsis, seed, pool, chunk_rows=4000)
    return small_run, tasks, sepsis, summary


def test_featurize_outputs(featurized):
    run_dir, tasks, _, summary = featurized
    assert set(summary) == set(tasks)
    vocab = json.loads((run_dir / "datasets" / "vocabulary.json").read_text())
    for table, q in QUOTAS:
        assert vocab["sizes"][table] + vocab["shortfall"].get(table, 0) == q
    for name, s in summary.items():
        d = run_dir / "datasets" / name
        assert (d / "train.csv").exists() and (d / "test.csv").exists() and (d / "folds.json").exists()
        log_rows = read_csv(d / "cohort_log.csv")
        assert sum(r["status"] == "included" for r in log_rows) == s["rows"]
        assert all(r["reason"] for r in log_rows if r["status"] == "excluded")
        cols = json.loads((d / "columns.json").read_text())["features"] if s["rows"] else []
        if s["rows"]:
            assert len(cols) == s["features"]
    assert summary["los_gt3d"]["rows"] > 0 and summary["mortality_7d"]["rows"] > 0


def test_exported_labels_recompute_from_bundles(featurized):
    run_dir, tasks, sepsis, _ = featurized
    dirs = patient_dirs_with_stays(run_dir / "stage5")
    bundles = {b.person_id: b for b in map(load_bundle, dirs)}
    for name in ("mortality_30d", "los_gt7d", "readmit_30d", "sepsis_7d"):
        task = tasks[name]
        d = run_dir / "datasets" / name
        for r in read_csv(d / "train.csv") + read_csv(d / "test.csv"):
            b = bundles[int(r["person_id"])]
            label, why = label_stay(task, b.stays, int(r["stay_index"]), bundle_death(b),
                                    bundle_sepsis(b, frozenset(sepsis)))
            assert why == "" and label == int(r["label"])
