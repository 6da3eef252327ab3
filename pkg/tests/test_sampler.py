import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specmatch.errors import NoPositivePairs, TooFewClasses
from specmatch.sampler import (
    BootstrapPlan,
    SplitSpec,
    dataset_pair_counts,
    holdout_one_per_class,
    make_plan,
    pair_counts,
    positive_pairs,
    sample_epoch,
    sample_epoch_indices,
    sample_validation_pairs,
    split_classes,
)
from specmatch.spectra_io import Dataset, Spectrum


def toy(sizes, length=4):
    spectra = []
    for c, n in enumerate(sizes):
        for j in range(n):
            spectra.append(Spectrum(np.full(length, float(c)), c, f"c{c}-s{j}"))
    return Dataset(spectra)


def brute_force_counts(n_classes, per_class):
    labels = [c for c in range(n_classes) for _ in range(per_class)]
    pos = neg = 0
    for a, b in itertools.combinations(labels, 2):
        if a == b:
            pos += 1
        else:
            neg += 1
    return pos, neg


def test_pair_count_examples():
    assert pair_counts(100, 10) == (4500, 495000)
    assert pair_counts(1, 5) == (10, 0)
    assert pair_counts(3, 2) == (3, 12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 8))
def test_pair_counts_match_enumeration(n, m):
    assert pair_counts(n, m) == brute_force_counts(n, m)


def test_dataset_pair_counts_uneven():
    ds = toy([3, 1, 2])
    pos, neg = dataset_pair_counts(ds)
    labels = [s.class_id for s in ds]
    assert pos == sum(a == b for a, b in itertools.combinations(labels, 2)) == 4
    assert neg == 15 - 4
    assert len(positive_pairs(ds)) == pos


def test_epoch_balance_example():
    ds = toy([2, 2, 2])
    plan = make_plan(ds, rng_seed=1)
    assert (plan.S_m, plan.S_n) == (3, 12)
    pairs = list(sample_epoch(ds, plan, 0))
    assert len(pairs) == 6 == plan.pairs_per_iteration
    assert sum(p.label for p in pairs) == 3


@pytest.mark.parametrize("seed", range(5))
def test_every_pair_label_is_correct(seed):
    ds = toy([5, 3, 1, 4, 2])
    plan = make_plan(ds, rng_seed=seed)
    for epoch in range(3):
        for p in sample_epoch(ds, plan, epoch):
            assert p.label == int(p.a.class_id == p.b.class_id)
            assert p.a.sample_id != p.b.sample_id


def test_epoch_determinism():
    ds = toy([4, 4, 4])
    plan = make_plan(ds, rng_seed=7)
    a = sample_epoch_indices(ds, plan, 3)
    b = sample_epoch_indices(ds, plan, 3)
    c = sample_epoch_indices(ds, plan, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def test_explicit_positive_count():
    ds = toy([3, 3])
    ia, ib, y = sample_epoch_indices(ds, make_plan(ds, 0, n_pos=50), 0)
    assert len(y) == 100 and y.sum() == 50


def test_with_replacement_duplicates_occur():
    ds = toy([2, 2])  # two distinct positive pairs
    dup = 0
    for seed in range(20):
        ia, ib, y = sample_epoch_indices(ds, make_plan(ds, seed, n_pos=5), 0)
        pos = [tuple(sorted(p)) for p, lab in zip(zip(ia, ib), y) if lab]
        dup += len(pos) > len(set(pos))
    assert dup == 20


def test_positive_pair_frequencies_uniform():
    ds = toy([3, 3, 3])  # 9 distinct positive pairs
    plan = make_plan(ds, rng_seed=11)
    counts = Counter()
    for epoch in range(2000):
        ia, ib, y = sample_epoch_indices(ds, plan, epoch)
        counts.update(tuple(sorted(p)) for p, lab in zip(zip(ia.tolist(), ib.tolist()), y) if lab)
    expected = sum(counts.values()) / 9
    assert len(counts) == 9
    assert all(abs(v - expected) <= 0.1 * expected for v in counts.values())


def test_negative_pairs_cover_all_class_pairs():
    ds = toy([2, 3, 4])
    plan = make_plan(ds, rng_seed=2, n_pos=300)
    seen = Counter()
    ia, ib, y = sample_epoch_indices(ds, plan, 0)
    for a, b, lab in zip(ia, ib, y):
        if not lab:
            seen[tuple(sorted((ds[a].class_id, ds[b].class_id)))] += 1
    assert set(seen) == {(0, 1), (0, 2), (1, 2)}


def test_errors():
    with pytest.raises(NoPositivePairs):
        make_plan(toy([1, 1, 1]))
    with pytest.raises(TooFewClasses):
        sample_epoch_indices(toy([4]), BootstrapPlan(6, 0, 0), 0)
    with pytest.warns(UserWarning):
        make_plan(toy([5, 1]))


def test_split_examples():
    assert tuple(map(len, split_classes(range(512), SplitSpec(0.5, 0.1, 0.4, 0)))) == (256, 51, 205)
    assert tuple(map(len, split_classes(range(10), SplitSpec(0.5, 0.1, 0.4, 0)))) == (5, 1, 4)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 200), st.integers(0, 1000))
def test_split_disjoint_exhaustive_and_pure(n, seed):
    spec = SplitSpec(rng_seed=seed)
    tr, va, te = split_classes(range(n), spec)
    assert sorted(tr + va + te) == list(range(n))
    assert not (set(tr) & set(va) or set(tr) & set(te) or set(va) & set(te))
    assert (tr, va, te) == split_classes(list(reversed(range(n))), spec)


def test_split_errors():
    with pytest.raises(TooFewClasses):
        split_classes([1, 2])
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.5)


def test_holdout_examples():
    ds = toy([4, 4, 4])
    test, rest = holdout_one_per_class(ds, 0)
    assert (len(test), len(rest)) == (3, 9)
    assert sorted(s.class_id for s in test) == [0, 1, 2]
    assert not set(test.sample_ids()) & set(rest.sample_ids())
    again, _ = holdout_one_per_class(ds, 0)
    assert again.sample_ids() == test.sample_ids()


def test_holdout_skips_singletons():
    ds = toy([3, 1])
    with pytest.warns(UserWarning):
        test, rest = holdout_one_per_class(ds, 0)
    assert [s.class_id for s in test] == [0]
    assert "c1-s0" in rest.sample_ids()


def test_validation_pairs_plain_and_anchored():
    val = toy([2, 2, 2])
    ia, ib, y = sample_validation_pairs(val, 40, 3)
    assert len(y) == 40 and y.sum() == 20
    for a, b, lab in zip(ia, ib, y):
        assert lab == int(val[a].class_id == val[b].class_id)

    one_each = toy([1, 1, 1])
    anchors = toy([3, 3, 3])
    ia, ib, y = sample_validation_pairs(one_each, 40, 3, anchors=anchors)
    assert y.sum() == 20
    for a, b, lab in zip(ia, ib, y):
        assert lab == int(one_each[a].class_id == anchors[b].class_id)


def test_single_class_validation_uses_negative_pool():
    val = Dataset([Spectrum(np.zeros(4), 9, f"v{j}") for j in range(3)])
    pool = toy([2, 2])
    ia, ib, y = sample_validation_pairs(val, 30, 0, negative_pool=pool)
    assert y.sum() == 15
    joined = list(val) + list(pool)
    for a, b, lab in zip(ia, ib, y):
        assert lab == int(val[a].class_id == joined[b].class_id)
        if lab:
            assert b < len(val) and a != b
    with pytest.raises(TooFewClasses):
        sample_validation_pairs(val, 30, 0)
