"""Evaluation protocols and metrics.

Two protocols are provided:

* one-shot (:func:`run_one_shot`): classes are split into disjoint
  train/validation/test groups; a Siamese model trained on the training
  classes matches every test sample against a database holding one random
  reference per test class. NN(L2) and NN(cosine) baselines see exactly the
  same references and queries.
* multi-class (:func:`run_multiclass`): one sample per class is held out
  for testing and the model is trained on the remaining samples of all
  classes, either as a Siamese matcher or as a softmax classifier.

Scores are macro-F1 (unweighted mean of per-class F1) and accuracy.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import LengthMismatch
from .matcher import build_db, match_many, nn_baseline_predict
from .repro import derive_seed
from .sampler import SplitSpec, holdout_one_per_class, split_classes
from .spectra_io import Dataset
from .trainer import TrainConfig, train_classifier, train_siamese

__all__ = [
    "ClassStats",
    "RunResult",
    "EvalReport",
    "confusion_counts",
    "per_class_stats",
    "macro_f1",
    "accuracy",
    "run_one_shot",
    "run_multiclass",
    "write_report_csv",
    "read_report_csv",
]

log = logging.getLogger(__name__)

METHODS = ("siamese", "l2", "cosine")


@dataclass(frozen=True)
class ClassStats:
    precision: float
    recall: float
    f1: float
    support: int


def confusion_counts(predictions, truths, labels=None):
    """``(labels, counts)`` with ``counts[i, j]`` = number of samples of
    ``labels[i]`` predicted as ``labels[j]``."""
    p = np.asarray(predictions)
    t = np.asarray(truths)
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} truths")
    if labels is None:
        labels = np.union1d(p, t)
    labels = np.asarray(labels)
    ti = np.searchsorted(labels, t)
    pi = np.searchsorted(labels, p)
    counts = np.zeros((labels.size, labels.size), dtype=np.int64)
    np.add.at(counts, (ti, pi), 1)
    return labels, counts


def per_class_stats(predictions, truths, labels=None):
    """Per-class precision, recall and F1 (F1 is 0 when P + R = 0)."""
    labels, counts = confusion_counts(predictions, truths, labels)
    tp = np.diag(counts).astype(float)
    pred_n = counts.sum(axis=0)
    true_n = counts.sum(axis=1)
    out = {}
    for i, c in enumerate(labels.tolist()):
        prec = tp[i] / pred_n[i] if pred_n[i] else 0.0
        rec = tp[i] / true_n[i] if true_n[i] else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        out[c] = ClassStats(prec, rec, f1, int(true_n[i]))
    return out


def macro_f1(predictions, truths, labels=None) -> float:
    """Unweighted mean of per-class F1.

    The class set is ``labels`` when given, otherwise every class that
    occurs as a truth or a prediction.
    """
    if len(predictions) != len(truths):
        raise LengthMismatch(f"{len(predictions)} predictions vs {len(truths)} truths")
    if len(truths) == 0:
        raise ValueError("macro_f1 of an empty evaluation")
    stats = per_class_stats(predictions, truths, labels)
    return float(np.mean([s.f1 for s in stats.values()]))


def accuracy(predictions, truths) -> float:
    p, t = np.asarray(predictions), np.asarray(truths)
    if p.shape != t.shape:
        raise LengthMismatch(f"{p.size} predictions vs {t.size} truths")
    return float(np.mean(p == t))


@dataclass
class RunResult:
    seed: int
    macro_f1: float
    accuracy: float
    n_queries: int
    per_class: dict = field(default_factory=dict)
    labels: np.ndarray | None = None
    confusion: np.ndarray | None = None

    @classmethod
    def score(cls, seed, predictions, truths):
        labels, conf = confusion_counts(predictions, truths)
        return cls(
            seed=int(seed),
            macro_f1=macro_f1(predictions, truths),
            accuracy=accuracy(predictions, truths),
            n_queries=len(truths),
            per_class=per_class_stats(predictions, truths),
            labels=labels,
            confusion=conf,
        )


def _mean_std(values):
    v = np.asarray(values, dtype=float)
    return float(np.mean(v)), float(np.std(v, ddof=1)) if v.size > 1 else 0.0


@dataclass
class EvalReport:
    """Per-method, per-repeat results of one protocol.

    ``runs[method][r]`` is the :class:`RunResult` of repeat ``r``; the
    summary statistics are recomputed from these on demand (sample
    standard deviation).
    """

    protocol: str
    seeds: list = field(default_factory=list)
    runs: dict = field(default_factory=dict)
    train_reports: list = field(default_factory=list)

    @property
    def methods(self):
        return list(self.runs)

    def f1s(self, method):
        return [r.macro_f1 for r in self.runs[method]]

    def accuracies(self, method):
        return [r.accuracy for r in self.runs[method]]

    def mean_std(self, method, metric="macro_f1"):
        return _mean_std([getattr(r, metric) for r in self.runs[method]])

    def summary(self):
        lines = [f"protocol: {self.protocol}  repeats: {len(self.seeds)}  metric: macro-F1 (unweighted)"]
        lines.append(f"{'method':<12}{'macro-F1':>20}{'accuracy':>20}")
        for m in self.methods:
            f, fs = self.mean_std(m)
            a, as_ = self.mean_std(m, "accuracy")
            lines.append(f"{m:<12}{f:>12.3f} ± {fs:<5.3f}{a:>12.3f} ± {as_:<5.3f}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# protocols


def _one_reference_per_class(dataset, rng_seed):
    rng = np.random.default_rng(rng_seed)
    refs, queries = [], []
    for ix in dataset.class_index.values():
        pick = ix[rng.integers(len(ix))]
        refs.append(pick)
        queries.extend(i for i in ix if i != pick)
    return dataset.select(refs), dataset.select(queries)


def run_one_shot(dataset: Dataset, cfg: TrainConfig = TrainConfig(), n_repeats=5, seed=0, specs=None,
                 methods=METHODS, split=(0.5, 0.1, 0.4), batch_hook=None) -> EvalReport:
    """One-shot protocol on classes unseen during training.

    Every repeat draws a fresh class split and reference assignment from
    ``derive_seed(seed, stage, repeat)``. Test classes with a single sample
    still act as references but contribute no queries.
    """
    report = EvalReport("one-shot")
    for m in methods:
        report.runs[m] = []
    for r in range(n_repeats):
        run_seed = derive_seed(seed, "repeat", r)
        tr, va, te = split_classes(dataset.class_ids, SplitSpec(*split, rng_seed=derive_seed(run_seed, "split")))
        test = dataset.subset(te)
        refs, queries = _one_reference_per_class(test, derive_seed(run_seed, "references"))
        if len(queries) == 0:
            raise ValueError("test classes hold no query samples; every class needs >= 2 samples")
        truths = queries.labels()
        report.seeds.append(run_seed)
        for m in methods:
            if m == "siamese":
                model, tr_report = train_siamese(
                    dataset.subset(tr), dataset.subset(va), cfg.replace(seed=derive_seed(run_seed, "train")),
                    specs, batch_hook=batch_hook,
                )
                report.train_reports.append(tr_report)
                db = build_db(model, refs)
                pred = [res.predicted for res in match_many(db, list(queries), model)]
            elif m in ("l2", "cosine"):
                pred = nn_baseline_predict(refs.matrix(float), refs.labels(), queries.matrix(float), m)
            else:
                raise ValueError(f"unknown method {m!r}")
            report.runs[m].append(RunResult.score(run_seed, pred, truths))
            log.info("one-shot repeat %d %s macro-F1 %.3f", r, m, report.runs[m][-1].macro_f1)
    return report


def _usable_classes(dataset, minimum):
    small = [c for c, ix in dataset.class_index.items() if len(ix) < minimum]
    if small:
        warnings.warn(f"skipping {len(small)} classes with fewer than {minimum} samples", stacklevel=3)
    return dataset.subset([c for c in dataset.class_ids if c not in small])


def run_multiclass(dataset: Dataset, cfg: TrainConfig = TrainConfig(), n_repeats=3, seed=0, mode="siamese",
                   augment=False, specs=None, batch_hook=None) -> EvalReport:
    """Multi-class protocol on known classes.

    Per repeat one sample per class is held out for testing and a second
    one for early stopping; the model trains on the rest. In ``siamese``
    mode each test sample is matched against all non-test samples of every
    class; in ``classifier`` mode the softmax argmax is used. Classes with
    fewer than 3 samples are skipped with a warning.
    """
    if mode not in ("siamese", "classifier"):
        raise ValueError(f"mode must be 'siamese' or 'classifier', got {mode!r}")
    data = _usable_classes(dataset, 3)
    report = EvalReport(f"multiclass-{mode}" + ("-augmented" if augment else ""))
    report.runs[mode] = []
    train_cfg = cfg.replace(augment=bool(augment))
    for r in range(n_repeats):
        run_seed = derive_seed(seed, "repeat", r)
        test, rest = holdout_one_per_class(data, derive_seed(run_seed, "holdout"))
        val, train = holdout_one_per_class(rest, derive_seed(run_seed, "validation"))
        rcfg = train_cfg.replace(seed=derive_seed(run_seed, "train"))
        if mode == "siamese":
            model, tr_report = train_siamese(train, val, rcfg, specs, val_anchors=train, batch_hook=batch_hook)
            db = build_db(model, rest)
            pred = [res.predicted for res in match_many(db, list(test), model)]
        else:
            model, tr_report = train_classifier(train, val, rcfg, specs, batch_hook=batch_hook)
            pred = model.predict(test.matrix(model.dtype))
        report.train_reports.append(tr_report)
        report.seeds.append(run_seed)
        report.runs[mode].append(RunResult.score(run_seed, pred, test.labels()))
        log.info("%s repeat %d accuracy %.3f", report.protocol, r, report.runs[mode][-1].accuracy)
    return report


# --------------------------------------------------------------------------
# report files

REPORT_COLUMNS = ("method", "run", "seed", "macro_f1", "accuracy", "n_queries")


def write_report_csv(report: EvalReport, path, stamp=None):
    """Write a report.

    ``#`` header lines carry the stamp, the protocol and per-method
    ``mean``/``std`` of macro-F1 and accuracy; the table has one row per
    (method, repeat) with columns ``method, run, seed, macro_f1, accuracy,
    n_queries``. Floats use shortest round-trip formatting.
    """
    buf = io.StringIO()
    if stamp:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in sorted(stamp.items())) + "\n")
    buf.write(f"# protocol={report.protocol} metric=macro-F1-unweighted std=sample\n")
    for m in report.methods:
        f, fs = report.mean_std(m)
        a, as_ = report.mean_std(m, "accuracy")
        buf.write(f"# {m} macro_f1_mean={f!r} macro_f1_std={fs!r} accuracy_mean={a!r} accuracy_std={as_!r}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for m in report.methods:
        for i, run in enumerate(report.runs[m]):
            w.writerow([m, i, run.seed, repr(run.macro_f1), repr(run.accuracy), run.n_queries])
    Path(path).write_text(buf.getvalue())


def read_report_csv(path):
    """Parse :func:`write_report_csv` output into ``(header, rows)``:
    ``header[method]`` maps statistic names to floats, ``rows`` is a list of
    dicts."""
    header, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("# "):
            parts = line[2:].split()
            if parts and "=" not in parts[0] and parts[0]:
                header[parts[0]] = {k: float(v) for k, v in (p.split("=", 1) for p in parts[1:])}
        else:
            body.append(line)
    rows = list(csv.DictReader(body))
    for row in rows:
        row["run"] = int(row["run"])
        row["seed"] = int(row["seed"])
        row["macro_f1"] = float(row["macro_f1"])
        row["accuracy"] = float(row["accuracy"])
        row["n_queries"] = int(row["n_queries"])
    return header, rows
