import math

import numpy as np
import pytest

from gradcases import tiny_twin_specs
from specmatch.repro import derive_seed
from specmatch.sampler import sample_validation_pairs
from specmatch.siamese import bce_with_logits
from specmatch.spectra_io import Dataset, Grid, Spectrum, synth_dataset
from specmatch.trainer import TrainConfig, TrainReport, lr_at, train_classifier, train_siamese, write_report_csv

GRID = Grid(0.0, 63.0, 64)


def small_specs():
    return tiny_twin_specs()


def synth(n_classes, per_class, seed, **kw):
    kw.setdefault("noise", 0.0)
    kw.setdefault("baseline_degree", None)
    kw.setdefault("peak_width_range", (1.5, 3.0))
    kw.setdefault("peak_count_range", (2, 4))
    return synth_dataset(n_classes, per_class, rng_seed=seed, grid=GRID, **kw)


def by_class(ds, classes):
    return ds.select([i for i, s in enumerate(ds) if s.class_id in classes])


def test_lr_examples():
    cfg = TrainConfig(base_lr=1e-3, lr_halving_period=10)
    assert lr_at(0, cfg) == 1e-3
    assert lr_at(10, cfg) == 5e-4
    assert lr_at(25, cfg) == 2.5e-4
    assert lr_at(9, cfg) == 2 * lr_at(10, cfg)
    for period in (None, math.inf):
        assert lr_at(1000, cfg.replace(lr_halving_period=period)) == 1e-3


def test_config_validation():
    for kw in ({"epochs": 0}, {"base_lr": 0.0}, {"early_stop_patience": 0}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


@pytest.fixture(scope="module")
def two_class_run():
    ds = synth(4, 6, seed=3)
    train, val = by_class(ds, {0, 1}), by_class(ds, {2, 3})
    cfg = TrainConfig(epochs=30, seed=5, batch_size=16, val_pairs=200, early_stop_patience=30)
    model, report = train_siamese(train, val, cfg, small_specs())
    return train, val, cfg, model, report


def test_validation_loss_decreases(two_class_run):
    *_, report = two_class_run
    assert min(report.val_loss) < report.initial_val_loss
    assert report.epochs_run == len(report.val_loss) == len(report.lr) == 30


def test_schedule_recorded_every_epoch(two_class_run):
    _, _, cfg, _, report = two_class_run
    assert report.lr == [lr_at(e, cfg) for e in range(report.epochs_run)]


def test_best_snapshot_restored(two_class_run):
    train, val, cfg, model, report = two_class_run
    best = int(np.argmin(report.val_loss))
    assert report.best_epoch == best
    ia, ib, y = sample_validation_pairs(val, cfg.val_pairs, derive_seed(cfg.seed, "val-pairs"), negative_pool=train)
    f = model.embed_batch(val.matrix(np.float32))
    z = model.logits(f[ia], f[ib]).astype(float)
    assert float(np.mean(bce_with_logits(z, y))) == pytest.approx(report.val_loss[best], rel=1e-6)


def test_patience_stops_early():
    ds = synth(3, 4, seed=1)
    cfg = TrainConfig(epochs=30, seed=1, batch_size=8, val_pairs=50, early_stop_patience=1)
    _, report = train_siamese(ds, ds, cfg, small_specs())
    assert report.stopped_epoch <= cfg.epochs - 1
    assert report.epochs_run == report.stopped_epoch + 1
    assert report.best_epoch >= -1
    if report.epochs_run < cfg.epochs:
        assert report.stopped_epoch - report.best_epoch == 1


def test_training_is_deterministic():
    ds = synth(4, 3, seed=2)
    train, val = by_class(ds, {0, 1}), by_class(ds, {2, 3})
    cfg = TrainConfig(epochs=3, seed=9, batch_size=8, val_pairs=40)
    m1, r1 = train_siamese(train, val, cfg, small_specs())
    m2, r2 = train_siamese(train, val, cfg, small_specs())
    assert r1.train_loss == r2.train_loss and r1.val_loss == r2.val_loss
    assert all(np.array_equal(a, b) for a, b in zip(m1.state_arrays(), m2.state_arrays()))


def test_no_validation_sample_in_gradient_steps():
    ds = synth(6, 3, seed=4)
    train, val = by_class(ds, {0, 1, 2, 3}), by_class(ds, {4, 5})
    seen = set()
    cfg = TrainConfig(epochs=2, seed=0, batch_size=8, val_pairs=40)
    train_siamese(train, val, cfg, small_specs(), batch_hook=seen.update)
    assert seen and seen <= set(train.sample_ids())
    assert not seen & set(val.sample_ids())


def test_single_validation_class():
    ds = synth(4, 3, seed=6)
    train, val = by_class(ds, {0, 1, 2}), by_class(ds, {3})
    _, report = train_siamese(train, val, TrainConfig(epochs=2, seed=0, batch_size=8, val_pairs=40), small_specs())
    assert np.isfinite(report.val_loss).all()


def test_checkpoint_written(tmp_path):
    ds = synth(3, 3, seed=7)
    path = tmp_path / "best.ssnm"
    cfg = TrainConfig(epochs=2, seed=0, batch_size=8, val_pairs=20, checkpoint_path=str(path))
    _, report = train_siamese(ds, ds, cfg, small_specs())
    assert path.exists() == (report.best_epoch >= 0)


def test_augmentation_changes_losses():
    ds = synth(3, 4, seed=8)
    cfg = TrainConfig(epochs=2, seed=0, batch_size=8, val_pairs=40)
    _, plain = train_siamese(ds, ds, cfg, small_specs())
    _, aug = train_siamese(ds, ds, cfg.replace(augment=True), small_specs())
    assert plain.train_loss != aug.train_loss
    _, cplain = train_classifier(ds, None, cfg, small_specs())
    _, caug = train_classifier(ds, None, cfg.replace(augment=True), small_specs())
    assert cplain.train_loss != caug.train_loss


def test_classifier_fits_separable_data():
    ds = synth(3, 6, seed=10)
    cfg = TrainConfig(epochs=30, seed=0, batch_size=6, early_stop_patience=30)
    model, report = train_classifier(ds, None, cfg, small_specs())
    assert max(report.train_accuracy) == 1.0
    assert np.mean(model.predict(ds.matrix(np.float32)) == np.array(ds.labels())) == 1.0


def test_classifier_random_labels_no_leakage():
    k = 4
    ds = synth(k, 50, seed=11, noise=0.02)
    rng = np.random.default_rng(0)
    labels = rng.integers(k, size=len(ds))
    shuffled = Dataset([Spectrum(s.intensities, int(c), s.sample_id, s.grid) for s, c in zip(ds, labels)])
    order = rng.permutation(len(ds))
    train, val = shuffled.select(sorted(order[:120])), shuffled.select(sorted(order[120:]))
    cfg = TrainConfig(epochs=15, seed=0, batch_size=16, early_stop_patience=15)
    model, _ = train_classifier(train, val, cfg, small_specs())
    acc = np.mean(model.predict(val.matrix(np.float32)) == np.array(val.labels()))
    assert abs(acc - 1 / k) <= 0.15


def test_report_csv(tmp_path):
    r = TrainReport(train_loss=[0.5, 0.25], val_loss=[0.6, 0.3], lr=[1e-3, 1e-3])
    write_report_csv(r, tmp_path / "r.csv", {"seed": 1, "tool": "x"})
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "# seed=1 tool=x"
    assert lines[1] == "epoch,train_loss,val_loss,lr"
    assert lines[2] == "0,0.5,0.6,0.001"
    assert len(lines) == 4


def test_empty_splits_rejected():
    ds = synth(3, 2, seed=0)
    with pytest.raises(ValueError):
        train_siamese(ds, ds.select([]), TrainConfig(epochs=1), small_specs())
