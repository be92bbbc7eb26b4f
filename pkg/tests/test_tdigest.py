import math
import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from omoprep.tdigest import EmptyDigestError, TDigest, merge_all

_values = st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=400)


def test_median_of_1_to_100():
    d = TDigest(100).update(range(1, 101))
    assert d.quantile(0.5) == pytest.approx(50.5, abs=1.0)


def test_single_value():
    d = TDigest().add(7.0)
    for q in (0.0, 0.01, 0.5, 0.99, 1.0):
        assert d.quantile(q) == 7.0


def test_uniform_tails():
    x = np.random.default_rng(11).random(1_000_000)
    d = TDigest(100).update(x)
    assert abs(d.quantile(0.01) - 0.01) <= 0.002
    assert abs(d.quantile(0.99) - 0.99) <= 0.002


def test_empty_digest_errors():
    with pytest.raises(EmptyDigestError):
        TDigest().quantile(0.5)
    with pytest.raises(ValueError):
        TDigest().add(float("nan"))
    with pytest.raises(ValueError):
        TDigest().add(1.0).quantile(1.5)


@settings(max_examples=80, deadline=None)
@given(values=_values, delta=st.sampled_from([10, 50, 100]))
def test_structural_invariants(values, delta):
    d = TDigest(delta).update(values).compress()
    means = [m for m, _ in d.centroids]
    assert means == sorted(means)
    assert len(d.centroids) <= math.ceil(2 * delta)
    assert d.total_weight == len(values)
    assert sum(w for _, w in d.centroids) == pytest.approx(len(values))
    assert d.quantile(0.0) == min(values)
    assert d.quantile(1.0) == max(values)
    qs = [d.quantile(q) for q in np.linspace(0, 1, 21)]
    assert all(a <= b + 1e-9 * max(1.0, abs(b)) for a, b in zip(qs, qs[1:]))


@settings(max_examples=60, deadline=None)
@given(a=_values, b=_values, c=_values)
def test_merge_is_additive_and_order_free(a, b, c):
    da, db, dc = (TDigest(50).update(v) for v in (a, b, c))
    left = da.merge(db.merge(dc))
    right = dc.merge(da).merge(db)
    assert left.total_weight == len(a) + len(b) + len(c)
    for q in (0.0, 0.01, 0.25, 0.5, 0.75, 0.99, 1.0):
        assert left.quantile(q) == right.quantile(q)


def test_merge_close_to_single_stream():
    rng = np.random.default_rng(5)
    x = rng.lognormal(0, 1, 200_000)
    whole = TDigest(100).update(x)
    parts = merge_all(TDigest(100).update(p) for p in np.array_split(x, 7))
    s = np.sort(x)
    for q in (0.01, 0.5, 0.99):
        for d in (whole, parts):
            rank = np.searchsorted(s, d.quantile(q)) / len(s)
            assert abs(rank - q) <= 0.002


def test_serialization_round_trip():
    d = TDigest(100).update(random.Random(1).random() for _ in range(5000))
    e = TDigest.from_dict(d.to_dict())
    for q in (0.0, 0.1, 0.5, 0.9, 1.0):
        assert e.quantile(q) == d.quantile(q)
