import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfl_lab.data import Dataset
from sfl_lab.selection import (
    SelectionSplit, build_rank_table, gaussian_class_scores, instance_select, mask_gradient, rank,
    sfl_plus_real_mask, top_k_split, topk_generated_filter,
)


def brute_top_k(scores, k):
    """Best k-subset by score sum, lexicographically smallest index tuple on ties."""
    target = sorted(scores, reverse=True)[:k]
    for combo in itertools.combinations(range(len(scores)), k):
        if sorted((scores[i] for i in combo), reverse=True) == target:
            return set(combo)


def test_top_k_basic():
    s = top_k_split([0.1, 0.9, 0.5], 1)
    assert s.selected.tolist() == [1]
    assert s.complement.tolist() == [0, 2]


def test_top_k_zero():
    s = top_k_split([0.1, 0.9, 0.5], 0)
    assert s.k == 0 and s.complement.tolist() == [0, 1, 2]


def test_top_k_tie_break_lowest_index():
    scores = [0.5, 0.5, 0.2]
    assert set(top_k_split(scores, 1).selected) == brute_top_k(scores, 1) == {0}


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=1, max_size=7), st.data())
def test_top_k_matches_enumeration(values, data):
    k = data.draw(st.integers(0, len(values)))
    assert set(top_k_split(values, k).selected.tolist()) == (brute_top_k(values, k) if k else set())


def test_top_k_rejects_bad_k():
    with pytest.raises(ValueError):
        top_k_split([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        top_k_split([1.0, 2.0], -1)


def test_rank_examples():
    assert rank([3, 1, 2]).tolist() == [1, 2, 0]
    assert rank([1, 2, 3, 4]).tolist() == [0, 1, 2, 3]
    assert rank([5, 5, 5]).tolist() == [0, 1, 2]


def test_rank_matches_brute_force_sort():
    values = [0.3, -1.0, 2.0, 0.3, 7.0, -1.0]
    expected = [i for _, i in sorted((v, i) for i, v in enumerate(values))]
    assert rank(values).tolist() == expected


def test_rank_rejects_nan_and_empty():
    with pytest.raises(ValueError):
        rank([1.0, np.nan])
    with pytest.raises(ValueError):
        rank([])


def test_rank_table_percentiles():
    t = build_rank_table([0.9, 0.1], [0, 0])
    assert t.percentile.tolist() == [1.0, 0.0]
    t = build_rank_table([0.4], [1], n_classes=2)
    assert t.percentile.tolist() == [1.0]
    assert t.order[0].size == 0
    t = build_rank_table([0.2, 0.8, 0.5, 0.9], [0, 0, 0, 0])
    np.testing.assert_allclose(t.percentile, [0, 2 / 3, 1 / 3, 1], rtol=0, atol=1e-15)


def test_rank_table_orders_within_class(rng):
    probs = rng.uniform(size=40)
    labels = rng.integers(0, 3, 40)
    t = build_rank_table(probs, labels, 3)
    for c, idx in t.order.items():
        assert np.all(np.diff(probs[idx]) >= 0)
        assert set(idx) == set(np.flatnonzero(labels == c))


def test_rank_table_csv(tmp_path):
    t = build_rank_table([0.2, 0.8], [0, 1])
    t.to_csv(tmp_path / "rank.csv")
    lines = (tmp_path / "rank.csv").read_text().splitlines()
    assert lines[0] == "dataset_index,class,gt_probability,percentile"
    assert len(lines) == 3


def test_sfl_plus_mask():
    t = build_rank_table([0.2, 0.8, 0.5, 0.9], [0, 0, 0, 0])
    idx = np.arange(4)
    assert sfl_plus_real_mask(t, idx, 0.0).k == 0
    assert sfl_plus_real_mask(t, idx, 1.0).k == 4
    # percentiles [0, 2/3, 1/3, 1]; threshold 0.5
    assert sfl_plus_real_mask(t, idx, 0.5).selected.tolist() == [1, 3]


def test_sfl_plus_half_of_even_classes(rng):
    labels = np.repeat(np.arange(3), 10)
    t = build_rank_table(rng.uniform(size=30), labels, 3)
    split = sfl_plus_real_mask(t, np.arange(30), 0.5)
    for c in range(3):
        assert np.sum(labels[split.selected] == c) == 5


def test_sfl_plus_rejects_unknown_index():
    t = build_rank_table([0.2, 0.8], [0, 0])
    with pytest.raises(ValueError):
        sfl_plus_real_mask(t, [0, 5], 0.5)


def test_topk_filter():
    assert topk_generated_filter([-3.0, 2.0, 0.0], 2).selected.tolist() == [1, 2]
    g = np.ones(3)
    assert np.array_equal(mask_gradient(g, topk_generated_filter([1.0, 2.0, 3.0], 3)), g)


def test_masked_gradient_zero_count(rng):
    B, k = 16, 5
    g = rng.normal(size=(B, 2)) + 10.0
    masked = mask_gradient(g, topk_generated_filter(rng.normal(size=B), k))
    assert np.sum(np.all(masked == 0, axis=1)) == B - k


def make_ds(x, labels):
    n = len(labels)
    return Dataset(np.asarray(x, float), np.asarray(labels), np.zeros(n, int), np.full(n, "train"), int(max(labels)) + 1)


def test_instance_select_identity(rng):
    ds = make_ds(rng.normal(size=(20, 2)), np.arange(20) % 2)
    out = instance_select(ds, gaussian_class_scores(ds.x, ds.labels), 1.0)
    np.testing.assert_array_equal(out.x, ds.x)


def test_instance_select_removes_outlier(rng):
    x = np.vstack([rng.normal(0, 0.1, size=(4, 2)), [[10.0, 10.0]]])
    ds = make_ds(x, [0] * 5)
    scores = gaussian_class_scores(ds.x, ds.labels)
    assert np.argmin(scores) == 4
    out = instance_select(ds, scores, 0.8)
    assert len(out) == 4
    assert not np.any(np.all(out.x == [10.0, 10.0], axis=1))
    assert ds.x.shape == (5, 2)


def test_instance_select_counts(rng):
    labels = np.repeat([0, 1, 2], [7, 10, 1])
    ds = make_ds(rng.normal(size=(18, 2)), labels)
    out = instance_select(ds, gaussian_class_scores(ds.x, ds.labels), 0.6)
    assert [int(np.sum(out.labels == c)) for c in range(3)] == [math.ceil(0.6 * 7), 6, 1]


def test_instance_select_rejects_ratio(rng):
    ds = make_ds(rng.normal(size=(4, 2)), [0, 0, 1, 1])
    with pytest.raises(ValueError):
        instance_select(ds, np.zeros(4), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 50, allow_nan=False), min_size=1, max_size=20), st.data())
def test_partition_property(scores, data):
    k = data.draw(st.integers(0, len(scores)))
    s = top_k_split(scores, k)
    assert sorted(s.selected.tolist() + s.complement.tolist()) == list(range(len(scores)))
    assert s.k == k


def test_split_from_mask_round_trip():
    m = np.array([True, False, True])
    assert np.array_equal(SelectionSplit.from_mask(m).mask, m)
