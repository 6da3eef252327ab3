"""Train a small Siamese model on synthetic spectra and use it as an
editable reference library.

Run with ``python3 demos/one_shot_demo.py``; it takes a few minutes.
"""

import numpy as np

from specmatch.evaluation import macro_f1
from specmatch.matcher import build_db, db_add, db_remove, match_many, match_one_shot, nn_baseline_predict
from specmatch.sampler import SplitSpec, split_classes
from specmatch.spectra_io import synth_dataset
from specmatch.trainer import TrainConfig, train_siamese


def main():
    ds = synth_dataset(30, 5, rng_seed=1, noise=0.02, spike_rate=1.0)
    train, val, test = split_classes(ds.class_ids, SplitSpec(rng_seed=0))
    print(f"classes: {len(train)} train, {len(val)} validation, {len(test)} unseen")

    cfg = TrainConfig(epochs=15, val_pairs=300)
    model, report = train_siamese(ds.subset(train), ds.subset(val), cfg)
    print(f"validation loss {report.initial_val_loss:.3f} -> {min(report.val_loss):.3f}")

    # one reference per unseen class, the rest are queries
    unseen = ds.subset(test)
    first = {c: ix[0] for c, ix in unseen.class_index.items()}
    refs = unseen.select(sorted(first.values()))
    queries = unseen.select([i for i in range(len(unseen)) if i not in first.values()])
    db = build_db(model, refs)
    truths = queries.labels()
    pred = [r.predicted for r in match_many(db, list(queries), model)]
    print(f"one-shot macro-F1 on unseen classes: siamese {macro_f1(pred, truths):.3f}", end="")
    for metric in ("cosine", "l2"):
        base = nn_baseline_predict(refs.matrix(), refs.labels(), queries.matrix(), metric)
        print(f", {metric} {macro_f1(base, truths):.3f}", end="")
    print()

    # the library is edited in place, without retraining
    query = queries[0]
    ranking = match_one_shot(db, query, model)
    print(f"query of class {query.class_id}: top classes {ranking.classes[:3]}")
    db_remove(db, ranking.classes[-1])
    print(f"after removing class {ranking.classes[-1]}: top class {match_one_shot(db, query, model).predicted}")
    new_class = max(ds.class_ids) + 1
    db_add(db, new_class, np.roll(query.intensities, 3), model, "shifted-copy")
    ranking = match_one_shot(db, query, model)
    print(f"after adding a 3-bin shifted copy as class {new_class}: top classes {ranking.classes[:3]}")


if __name__ == "__main__":
    main()
