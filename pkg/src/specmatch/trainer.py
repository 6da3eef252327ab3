"""Training loops for the Siamese model and the softmax classifier."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .nn import AdamState, adam_step
from .repro import derive_seed
from .sampler import make_plan, sample_epoch_indices, sample_validation_pairs
from .siamese import ClassifierModel, SiameseModel, bce_with_logits, save_model, softmax
from .spectra_io import AugmentPolicy, Dataset, augment_batch

__all__ = ["TrainConfig", "TrainReport", "lr_at", "train_siamese", "train_classifier", "write_report_csv"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters. ``lr_halving_period=None`` keeps the rate
    constant."""

    epochs: int = 30
    base_lr: float = 1e-3
    lr_halving_period: float | None = 10
    batch_size: int = 64
    early_stop_patience: int = 5
    seed: int = 0
    augment: bool = False
    augment_policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    use_bias: bool = True
    val_pairs: int = 2000
    pairs_per_epoch: int | None = None
    checkpoint_path: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or not self.base_lr > 0 or self.early_stop_patience < 1 or self.batch_size < 1:
            raise ValueError(f"invalid training config {self}")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    initial_val_loss: float = float("nan")
    best_epoch: int = -1
    stopped_epoch: int = -1
    seconds: float = 0.0
    train_accuracy: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)

    @property
    def epochs_run(self):
        return len(self.train_loss)


def lr_at(epoch, cfg: TrainConfig):
    period = cfg.lr_halving_period
    if period is None or math.isinf(period):
        return cfg.base_lr
    return cfg.base_lr * 0.5 ** (epoch // period)


def _batches(n, size):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def _val_bce(model, feats_a, feats_b, ia, ib, labels):
    z = model.logits(feats_a[ia], feats_b[ib]).astype(float)
    return float(np.mean(bce_with_logits(z, labels)))


def train_siamese(train: Dataset, val: Dataset, cfg: TrainConfig = TrainConfig(), specs=None,
                  val_anchors: Dataset | None = None, batch_hook=None, model=None):
    """Train a Siamese model on balanced bootstrap pairs from ``train``.

    After every epoch the mean BCE on a fixed seeded pair set from ``val``
    (or ``val`` against ``val_anchors``) is measured in eval mode. A
    single-class ``val`` draws its negatives from ``train``. The
    parameters of the best epoch are restored at the end. ``batch_hook``,
    if given, is called with the sample ids of every gradient batch.

    Returns
    -------
    model : SiameseModel
    report : TrainReport
    """
    t0 = time.perf_counter()
    if len(train) == 0 or len(val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if model is None:
        model = SiameseModel(specs, train.length, seed=derive_seed(cfg.seed, "init"), use_bias=cfg.use_bias)
    plan = make_plan(train, derive_seed(cfg.seed, "pairs"), cfg.pairs_per_epoch)
    ia_v, ib_v, y_v = sample_validation_pairs(val, cfg.val_pairs, derive_seed(cfg.seed, "val-pairs"), val_anchors,
                                              negative_pool=train)
    x_train = train.matrix(model.dtype)
    x_val = val.matrix(model.dtype)
    x_anchor = None if val_anchors is None else val_anchors.matrix(model.dtype)
    if val_anchors is None and len(val.class_index) == 1:
        # single validation class: negatives come from the training set
        x_anchor = np.concatenate([x_val, x_train])
    ids = np.array(train.sample_ids(), dtype=object)

    def validate():
        fa = model.embed_batch(x_val)
        fb = fa if x_anchor is None else model.embed_batch(x_anchor)
        return _val_bce(model, fa, fb, ia_v, ib_v, y_v)

    opt = AdamState(model.parameters(), lr=cfg.base_lr)
    report = TrainReport(initial_val_loss=validate())
    best = (report.initial_val_loss, model.get_state(), -1)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        ia, ib, labels = sample_epoch_indices(train, plan, epoch)
        aug_rng = np.random.default_rng(derive_seed(cfg.seed, "augment", epoch)) if cfg.augment else None
        total = 0.0
        for sl in _batches(len(labels), cfg.batch_size):
            xa, xb = x_train[ia[sl]], x_train[ib[sl]]
            if batch_hook is not None:
                batch_hook(list(ids[ia[sl]]) + list(ids[ib[sl]]))
            if aug_rng is not None:
                xa = augment_batch(xa, cfg.augment_policy, aug_rng)
                xb = augment_batch(xb, cfg.augment_policy, aug_rng)
            loss, grads = model.pair_loss_and_grads(xa, xb, labels[sl])
            adam_step(model.parameters(), grads, opt, lr)
            total += loss * len(labels[sl])
        report.train_loss.append(total / len(labels))
        report.lr.append(lr)
        v = validate()
        report.val_loss.append(v)
        report.stopped_epoch = epoch
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, report.train_loss[-1], v)
        if v < best[0]:
            best = (v, model.get_state(), epoch)
            if cfg.checkpoint_path:
                save_model(model, cfg.checkpoint_path)
        elif epoch - best[2] >= cfg.early_stop_patience:
            break
    model.set_state(best[1])
    report.best_epoch = best[2]
    report.seconds = time.perf_counter() - t0
    return model, report


def train_classifier(train: Dataset, val: Dataset | None, cfg: TrainConfig = TrainConfig(), specs=None,
                     batch_hook=None):
    """Train the softmax classifier on the classes present in ``train``.

    Early stopping uses the cross-entropy on ``val`` (when given and
    non-empty); otherwise the training loss.
    """
    t0 = time.perf_counter()
    class_ids = train.class_ids
    model = ClassifierModel(class_ids, specs, train.length, seed=derive_seed(cfg.seed, "init"))
    pos = {c: i for i, c in enumerate(class_ids)}
    x = train.matrix(model.dtype)
    y = np.array([pos[c] for c in train.labels()])
    ids = np.array(train.sample_ids(), dtype=object)
    have_val = val is not None and len(val) > 0
    if have_val:
        xv = val.matrix(model.dtype)
        yv = np.array([pos.get(c, -1) for c in val.labels()])
        keep = yv >= 0
        xv, yv = xv[keep], yv[keep]
        have_val = len(yv) > 0

    def evaluate(xe, ye):
        p = softmax(model.logits(xe).astype(float))
        loss = float(-np.mean(np.log(np.maximum(p[np.arange(len(ye)), ye], 1e-300))))
        return loss, float(np.mean(p.argmax(axis=1) == ye))

    opt = AdamState(model.parameters(), lr=cfg.base_lr)
    report = TrainReport()
    report.initial_val_loss = evaluate(xv, yv)[0] if have_val else evaluate(x, y)[0]
    best = (report.initial_val_loss, model.get_state(), -1)
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle", epoch))
        order = rng.permutation(len(y))
        total = 0.0
        for sl in _batches(len(order), cfg.batch_size):
            ix = order[sl]
            xb = x[ix]
            if batch_hook is not None:
                batch_hook(list(ids[ix]))
            if cfg.augment:
                xb = augment_batch(xb, cfg.augment_policy, rng)
            if len(ix) == 1:
                continue
            loss, grads = model.loss_and_grads(xb, y[ix])
            adam_step(model.parameters(), grads, opt, lr)
            total += loss * len(ix)
        report.train_loss.append(total / len(y))
        report.lr.append(lr)
        tl, ta = evaluate(x, y)
        report.train_accuracy.append(ta)
        if have_val:
            v, va = evaluate(xv, yv)
            report.val_accuracy.append(va)
        else:
            v = tl
        report.val_loss.append(v)
        report.stopped_epoch = epoch
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, report.train_loss[-1], v)
        if v < best[0]:
            best = (v, model.get_state(), epoch)
            if cfg.checkpoint_path:
                save_model(model, cfg.checkpoint_path)
        elif epoch - best[2] >= cfg.early_stop_patience:
            break
    model.set_state(best[1])
    report.best_epoch = best[2]
    report.seconds = time.perf_counter() - t0
    return model, report


def write_report_csv(report: TrainReport, path, stamp=None):
    """``epoch,train_loss,val_loss,lr`` rows, preceded by a ``#`` stamp line."""
    with open(path, "w", newline="") as fh:
        if stamp:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(stamp.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for i, (tl, vl, lr) in enumerate(zip(report.train_loss, report.val_loss, report.lr)):
            w.writerow([i, repr(tl), repr(vl), repr(lr)])
