"""Pair generation with bootstrap balancing, and class-level splits."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NoPositivePairs, TooFewClasses
from .spectra_io import Dataset, Spectrum

__all__ = [
    "SpectrumPair",
    "BootstrapPlan",
    "SplitSpec",
    "pair_counts",
    "dataset_pair_counts",
    "positive_pairs",
    "make_plan",
    "sample_epoch_indices",
    "sample_epoch",
    "sample_validation_pairs",
    "split_classes",
    "holdout_one_per_class",
]


@dataclass(frozen=True)
class SpectrumPair:
    a: Spectrum
    b: Spectrum
    label: int

    def __post_init__(self):
        if self.label != int(self.a.class_id == self.b.class_id):
            raise ValueError("pair label disagrees with class ids")


def pair_counts(n_classes: int, per_class: int):
    """Number of (positive, negative) unordered pairs for ``n_classes``
    classes of ``per_class`` samples each."""
    n, m = n_classes, per_class
    return m * (m - 1) * n // 2, m * m * n * (n - 1) // 2


def dataset_pair_counts(dataset: Dataset):
    sizes = np.array([len(ix) for ix in dataset.class_index.values()], dtype=np.int64)
    pos = int(np.sum(sizes * (sizes - 1) // 2))
    total = int(sizes.sum())
    neg = int((total * total - np.sum(sizes * sizes)) // 2)
    return pos, neg


def positive_pairs(dataset: Dataset):
    """All unordered same-class index pairs ``(i, j)``, ``i < j``, as an
    ``(S_m, 2)`` array."""
    rows = []
    for ix in dataset.class_index.values():
        ix = np.asarray(ix)
        a, b = np.triu_indices(len(ix), k=1)
        rows.append(np.stack([ix[a], ix[b]], axis=1))
    return np.concatenate(rows) if rows else np.zeros((0, 2), dtype=np.int64)


@dataclass(frozen=True)
class BootstrapPlan:
    """Per-epoch sampling plan: ``n_pos`` positives and as many negatives,
    drawn with replacement. ``S_m`` and ``S_n`` are the available pair
    counts."""

    S_m: int
    S_n: int
    rng_seed: int
    n_pos: int | None = None

    @property
    def pairs_per_iteration(self):
        return 2 * self.positives_per_epoch

    @property
    def positives_per_epoch(self):
        return self.S_m if self.n_pos is None else self.n_pos


def make_plan(dataset: Dataset, rng_seed=0, n_pos=None) -> BootstrapPlan:
    pos, neg = dataset_pair_counts(dataset)
    if pos == 0:
        raise NoPositivePairs("every class has a single sample")
    if pos > neg:
        warnings.warn(f"more positive ({pos}) than negative ({neg}) pairs", stacklevel=2)
    return BootstrapPlan(pos, neg, int(rng_seed), n_pos)


def _draw_negatives(class_members, k, rng):
    n_cls = len(class_members)
    c1 = rng.integers(n_cls, size=k)
    c2 = rng.integers(n_cls - 1, size=k)
    c2 = c2 + (c2 >= c1)
    ia = np.empty(k, dtype=np.int64)
    ib = np.empty(k, dtype=np.int64)
    sizes = np.array([len(m) for m in class_members])
    ra = (rng.random(k) * sizes[c1]).astype(np.int64)
    rb = (rng.random(k) * sizes[c2]).astype(np.int64)
    for t in range(k):
        ia[t] = class_members[c1[t]][ra[t]]
        ib[t] = class_members[c2[t]][rb[t]]
    return ia, ib


def sample_epoch_indices(dataset: Dataset, plan: BootstrapPlan, epoch: int):
    """Index form of :func:`sample_epoch`: arrays ``(ia, ib, labels)``.

    Positives are drawn uniformly with replacement from all same-class
    pairs; negatives by drawing an unordered pair of distinct classes, then
    one sample of each. The result depends only on ``(plan.rng_seed, epoch)``.
    """
    if len(dataset.class_index) < 2:
        raise TooFewClasses("negative pairs need at least two classes")
    pos = positive_pairs(dataset)
    if len(pos) == 0:
        raise NoPositivePairs("every class has a single sample")
    rng = np.random.default_rng([plan.rng_seed, epoch])
    k = plan.positives_per_epoch
    chosen = pos[rng.integers(len(pos), size=k)]
    members = [np.asarray(ix) for ix in dataset.class_index.values()]
    na, nb = _draw_negatives(members, k, rng)
    ia = np.concatenate([chosen[:, 0], na])
    ib = np.concatenate([chosen[:, 1], nb])
    labels = np.concatenate([np.ones(k, dtype=np.int64), np.zeros(k, dtype=np.int64)])
    order = rng.permutation(2 * k)
    return ia[order], ib[order], labels[order]


def sample_epoch(dataset: Dataset, plan: BootstrapPlan, epoch: int = 0):
    """Yield the balanced, shuffled pairs of one epoch."""
    ia, ib, labels = sample_epoch_indices(dataset, plan, epoch)
    for a, b, y in zip(ia, ib, labels):
        yield SpectrumPair(dataset[a], dataset[b], int(y))


def sample_validation_pairs(val: Dataset, n_pairs: int, rng_seed, anchors: Dataset | None = None,
                            negative_pool: Dataset | None = None):
    """Fixed balanced pair set for early stopping.

    Without ``anchors`` both members come from ``val``. With ``anchors`` the
    first member comes from ``val`` and the second from ``anchors``, which
    allows validation when ``val`` holds one sample per class. Returns
    ``(ia, ib, labels)`` indexing ``val`` and ``anchors or val``.

    A ``val`` set with a single class has no negative pairs of its own.
    In that case, and only then, negatives pair a ``val`` sample with a
    sample of ``negative_pool``; their ``ib`` indices are offset by
    ``len(val)`` so that ``ib`` indexes ``val`` followed by the pool.
    """
    rng = np.random.default_rng(rng_seed)
    k = max(1, n_pairs // 2)
    if anchors is None and len(val.class_index) == 1 and negative_pool is not None:
        return _single_class_validation(val, negative_pool, k, rng)
    if anchors is None:
        return sample_epoch_indices(val, BootstrapPlan(0, 0, int(rng.integers(2**62)), k), 0)
    a_index = anchors.class_index
    if len(a_index) < 2:
        raise TooFewClasses("anchor negatives need at least two anchor classes")
    shared = [c for c in val.class_index if c in a_index]
    if not shared:
        raise NoPositivePairs("validation classes share nothing with the anchor set")
    v_members = [np.asarray(val.class_index[c]) for c in shared]
    a_members = [np.asarray(a_index[c]) for c in shared]
    c = rng.integers(len(shared), size=k)
    pa = np.array([v_members[i][rng.integers(len(v_members[i]))] for i in c])
    pb = np.array([a_members[i][rng.integers(len(a_members[i]))] for i in c])
    anchor_classes = np.array(list(a_index))
    va = rng.integers(len(val), size=k)
    vb = np.empty(k, dtype=np.int64)
    for t in range(k):
        others = anchor_classes[anchor_classes != val[va[t]].class_id]
        members = a_index[int(others[rng.integers(len(others))])]
        vb[t] = members[rng.integers(len(members))]
    ia = np.concatenate([pa, va])
    ib = np.concatenate([pb, vb])
    labels = np.concatenate([np.ones(k, dtype=np.int64), np.zeros(k, dtype=np.int64)])
    order = rng.permutation(2 * k)
    return ia[order], ib[order], labels[order]


def _single_class_validation(val, pool, k, rng):
    (c,) = val.class_index
    pos = positive_pairs(val)
    if len(pos) == 0:
        raise NoPositivePairs("the validation class has a single sample")
    others = np.array([i for i in range(len(pool)) if pool[i].class_id != c], dtype=np.int64)
    if len(others) == 0:
        raise TooFewClasses("the negative pool holds no other class")
    chosen = pos[rng.integers(len(pos), size=k)]
    va = rng.integers(len(val), size=k)
    vb = others[rng.integers(len(others), size=k)] + len(val)
    ia = np.concatenate([chosen[:, 0], va])
    ib = np.concatenate([chosen[:, 1], vb])
    labels = np.concatenate([np.ones(k, dtype=np.int64), np.zeros(k, dtype=np.int64)])
    order = rng.permutation(2 * k)
    return ia[order], ib[order], labels[order]


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.5
    val: float = 0.1
    test: float = 0.4
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.train, self.val, self.test) < 0 or not math.isclose(self.train + self.val + self.test, 1.0):
            raise ValueError(f"split fractions must be >= 0 and sum to 1, got {self}")


def split_classes(class_ids, spec: SplitSpec = SplitSpec()):
    """Disjoint class split: ``round(train * N)`` training classes,
    ``floor(val * N)`` validation classes, the rest for testing."""
    ids = sorted(set(int(c) for c in class_ids))
    n = len(ids)
    if n < 3:
        raise TooFewClasses(f"need at least 3 classes to split, got {n}")
    n_train = min(math.floor(spec.train * n + 0.5), n)
    n_val = min(math.floor(spec.val * n + 1e-9), n - n_train)
    perm = np.random.default_rng(spec.rng_seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    return (
        sorted(shuffled[:n_train]),
        sorted(shuffled[n_train : n_train + n_val]),
        sorted(shuffled[n_train + n_val :]),
    )


def holdout_one_per_class(dataset: Dataset, rng_seed=0):
    """Pick one random sample per class as a test set.

    Classes with a single sample are skipped (with a warning) and stay in
    the remainder. Returns ``(test, rest)`` datasets.
    """
    rng = np.random.default_rng(rng_seed)
    test_ix = []
    skipped = []
    for c, ix in dataset.class_index.items():
        if len(ix) < 2:
            skipped.append(c)
            continue
        test_ix.append(ix[rng.integers(len(ix))])
    if skipped:
        warnings.warn(f"classes with a single sample kept out of the test set: {skipped}", stacklevel=2)
    chosen = set(test_ix)
    rest_ix = [i for i in range(len(dataset)) if i not in chosen]
    return dataset.select(sorted(test_ix)), dataset.select(rest_ix)
