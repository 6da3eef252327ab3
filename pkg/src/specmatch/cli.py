"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 usage or configuration
error.
"""

from __future__ import annotations

import os

# Byte-identical artifacts need a fixed floating-point reduction order.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402


from . import __version__  # noqa: E402
from .config import AppConfig, load_config  # noqa: E402
from .errors import ConfigError, NoValidFiles, SpecMatchError  # noqa: E402
from .evaluation import run_multiclass, run_one_shot, write_report_csv  # noqa: E402
from .matcher import (  # noqa: E402
    ReferenceDB,
    build_db,
    db_add_many,
    db_remove,
    export_features,
    load_db,
    match_one_shot,
    save_db,
)
from .preprocess import AslsConfig, asls_baseline, correct_dataset  # noqa: E402
from .repro import derive_seed, make_stamp  # noqa: E402
from .sampler import split_classes  # noqa: E402
from .siamese import load_model, save_model  # noqa: E402
from .spectra_io import (  # noqa: E402
    Dataset,
    Grid,
    normalize_minmax,
    read_cache,
    read_rruff,
    resample,
    spectrum_from_raw,
    synth_dataset,
    write_cache,
)
from .trainer import train_siamese  # noqa: E402
from .trainer import write_report_csv as write_train_csv  # noqa: E402

log = logging.getLogger("specmatch")


class UsageError(SpecMatchError):
    """Bad command-line usage; exit code 2."""


# --------------------------------------------------------------------------
# helpers


def _grid(text):
    try:
        start, end, n = text.split(",")
        return Grid(float(start), float(end), int(n)).validate()
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must be 'start,end,n': {exc}") from None


def _config(args) -> AppConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else AppConfig()
    overrides = {}
    for key in ("seed", "repeats", "epochs"):
        v = getattr(args, key, None)
        if v is not None:
            overrides[key] = v
    return cfg.replace(**overrides) if overrides else cfg


def _stamp(cfg: AppConfig):
    # where artifacts go does not change them, so it stays out of the hash
    settings = {k: v for k, v in cfg.as_dict().items() if k != "out_dir"}
    return make_stamp(settings, cfg.seed)


def ingest_dir(directory, grid: Grid, out=None, err=None) -> Dataset:
    """Parse every file in ``directory`` (sorted by name, hidden files
    skipped). Classes are keyed on the NAMES header; class ids follow the
    sorted names. Unparseable files are reported on ``err`` and skipped."""
    out = out or sys.stdout
    err = err or sys.stderr
    files = sorted(p for p in Path(directory).iterdir() if p.is_file() and not p.name.startswith("."))
    parsed = []
    for p in files:
        try:
            raw = read_rruff(p)
            name = raw.metadata.get("NAMES", "").strip()
            if not name:
                raise SpecMatchError("missing NAMES header")
            parsed.append((p, raw, name))
        except (SpecMatchError, UnicodeDecodeError, OSError, ValueError) as exc:
            print(f"warning: skipping {p.name}: {exc}", file=err)
    if not parsed:
        raise NoValidFiles(f"no parseable spectrum files in {directory}")
    names = sorted({name for _, _, name in parsed})
    ids = {name: i for i, name in enumerate(names)}
    spectra = [spectrum_from_raw(raw, grid, ids[name], p.stem) for p, raw, name in parsed]
    ds = Dataset(spectra, {i: name for name, i in ids.items()})
    print(f"{len(ds.class_ids)} classes, {len(ds)} samples", file=out)
    return ds


def _load_data(cfg: AppConfig, err=None) -> Dataset:
    if cfg.data_dir:
        return ingest_dir(cfg.data_dir, cfg.grid(), err=err)
    if cfg.data:
        return read_cache(cfg.data)
    return synth_dataset(
        cfg.synthetic_classes, cfg.synthetic_samples, rng_seed=derive_seed(cfg.seed, "synthetic"),
        noise=cfg.synthetic_noise, baseline_scale=cfg.synthetic_baseline_scale, grid=cfg.grid(),
    )


def _query_vector(path, grid: Grid, asls=None):
    y = normalize_minmax(resample(read_rruff(path), grid))
    if asls:
        y = normalize_minmax(y - asls_baseline(y))
    return y


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args):
    ds = ingest_dir(args.directory, args.grid)
    write_cache(ds, args.out, make_stamp({"grid": list(args.grid)}, None))
    return 0


def cmd_preprocess(args):
    ds = read_cache(args.data)
    cfg = AslsConfig(args.lam, args.p, args.max_iter, args.tol)
    out = correct_dataset(ds, cfg)
    stamp = dict(getattr(ds, "stamp", {}) or {})
    stamp["asls"] = f"lam={cfg.lam!r},p={cfg.p!r},max_iter={cfg.max_iter},tol={cfg.tol!r}"
    write_cache(out, args.out, stamp)
    print(f"corrected {len(out)} spectra")
    return 0


def _train(cfg: AppConfig, ds: Dataset):
    tr, va, _ = split_classes(ds.class_ids, cfg.split())
    model, report = train_siamese(ds.subset(tr), ds.subset(va), cfg.train_config())
    model.stamp = _stamp(cfg)
    return model, report


def cmd_train(args):
    cfg = _config(args)
    ds = _load_data(cfg)
    if cfg.preprocess:
        ds = correct_dataset(ds, cfg.asls())
    model, report = _train(cfg, ds)
    out = Path(args.model or Path(cfg.out_dir) / "model.ssnm")
    out.parent.mkdir(parents=True, exist_ok=True)
    snap = save_model(model, out)
    report_path = args.report or out.with_suffix(".train.csv")
    write_train_csv(report, report_path, _stamp(cfg))
    print(f"model {out} snapshot {snap:#010x} best epoch {report.best_epoch} val loss {min(report.val_loss):.4f}")
    return 0


def _evaluate(cfg: AppConfig, ds: Dataset, protocol, mode):
    tc = cfg.train_config(seed=0)
    if protocol == "one-shot":
        split = (cfg.split_train, cfg.split_val, cfg.split_test)
        return run_one_shot(ds, tc, cfg.repeats, derive_seed(cfg.seed, "eval"), split=split)
    return run_multiclass(ds, tc, cfg.repeats, derive_seed(cfg.seed, "eval"), mode=mode, augment=cfg.augment)


def cmd_eval(args):
    cfg = _config(args)
    if args.data:
        cfg = cfg.replace(data=args.data, data_dir=None)
    ds = _load_data(cfg)
    if cfg.preprocess:
        ds = correct_dataset(ds, cfg.asls())
    mode = args.mode or cfg.mode
    report = _evaluate(cfg, ds, args.protocol, mode)
    write_report_csv(report, args.out, _stamp(cfg))
    print(report.summary())
    return 0


def _open_db(path, model):
    if Path(path).exists():
        return load_db(path)
    return ReferenceDB.for_model(model)


def cmd_db(args):
    if args.db_command == "list":
        db = load_db(args.db)
        print("class_id\tn_references\tsample_ids")
        for c in db.class_ids:
            entries = db.entries[c]
            print(f"{c}\t{len(entries)}\t{','.join(e.sample_id for e in entries)}")
        return 0
    if args.db_command == "remove":
        db = load_db(args.db)
        for c in args.class_id:
            db_remove(db, c)
        save_db(db, args.db)
        print(f"removed {len(args.class_id)} classes; {len(db)} references left")
        return 0
    model = load_model(args.model)
    db = _open_db(args.db, model)
    if args.spectrum:
        if args.class_id is None:
            raise UsageError("--spectrum needs --class-id")
        y = _query_vector(args.spectrum, db.grid, args.asls)
        db_add_many(db, [args.class_id], [y], model, [Path(args.spectrum).stem])
        n = 1
    elif args.data:
        ds = read_cache(args.data)
        if args.classes:
            ds = ds.subset([int(c) for c in args.classes.split(",")])
        db.grid = ds.grid
        db_add_many(db, ds.labels(), list(ds), model, ds.sample_ids())
        n = len(ds)
    else:
        raise UsageError("db add needs --spectrum or --data")
    save_db(db, args.db)
    print(f"added {n} references; {len(db)} in database")
    return 0


def cmd_match(args):
    model = load_model(args.model)
    db = load_db(args.db)
    y = _query_vector(args.query, db.grid, args.asls)
    result = match_one_shot(db, y, model, k=args.knn)
    print("rank\tclass_id\tscore")
    for rank, (c, s) in enumerate(result.ranking[: args.top], 1):
        print(f"{rank}\t{c}\t{s!r}")
    return 0


def cmd_export(args):
    model = load_model(args.model)
    if args.db:
        source = load_db(args.db)
    elif args.data:
        source = read_cache(args.data)
    else:
        raise UsageError("export-features needs --db or --data")
    n = export_features(source, model, args.out, model.stamp)
    print(f"wrote {n} rows to {args.out}")
    return 0


def pipeline_plan(cfg: AppConfig):
    out = Path(cfg.out_dir)
    source = (f"ingest {cfg.data_dir}" if cfg.data_dir else f"cache {cfg.data}" if cfg.data
              else f"synthetic {cfg.synthetic_classes} classes x {cfg.synthetic_samples} samples")
    plan = [
        ("data", f"{source} -> {out / 'data.spcd'}"),
        ("preprocess", f"AsLS lam={cfg.asls_lam!r} p={cfg.asls_p!r}" if cfg.preprocess else "skipped"),
        ("train", f"{cfg.epochs} epochs, seed {cfg.seed} -> {out / 'model.ssnm'}, {out / 'train.csv'}"),
        ("db", f"test-class references -> {out / 'refs.spdb'}"),
        ("features", f"{out / 'features.csv'}"),
        ("eval", f"{cfg.protocol} x {cfg.repeats} -> {out / 'report.csv'}" if cfg.protocol != "none" else "skipped"),
    ]
    return plan


def cmd_pipeline(args):
    cfg = _config(args)
    if args.out_dir:
        cfg = cfg.replace(out_dir=args.out_dir)
    plan = pipeline_plan(cfg)
    if args.dry_run:
        print(f"config hash {_stamp(cfg)['config_hash']} seed {cfg.seed}")
        for stage, what in plan:
            print(f"{stage:<11}{what}")
        return 0
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stamp = _stamp(cfg)
    ds = _load_data(cfg)
    write_cache(ds, out / "data.spcd", stamp)
    if cfg.preprocess:
        ds = correct_dataset(ds, cfg.asls())
    model, report = _train(cfg, ds)
    save_model(model, out / "model.ssnm")
    write_train_csv(report, out / "train.csv", stamp)
    _, _, te = split_classes(ds.class_ids, cfg.split())
    test = ds.subset(te)
    refs = [test[ix[0]] for ix in test.class_index.values()]
    db = build_db(model, refs, stamp)
    save_db(db, out / "refs.spdb")
    export_features(test, model, out / "features.csv", stamp)
    if cfg.protocol != "none":
        ev = _evaluate(cfg, ds, cfg.protocol, cfg.mode)
        write_report_csv(ev, out / "report.csv", stamp)
        print(ev.summary())
    (out / "config.json").write_text(json.dumps({"stamp": stamp, "config": cfg.as_dict()}, indent=1, sort_keys=True))
    print(f"artifacts in {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="specmatch", description="One-shot Raman spectrum matching with a Siamese 1-D CNN.")
    p.add_argument("--version", action="version", version=f"specmatch {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("ingest", help="parse a directory of RRUFF files into a dataset cache")
    s.add_argument("directory")
    s.add_argument("--out", required=True, help="output SPCD cache")
    s.add_argument("--grid", type=_grid, default=Grid(150.0, 1350.0, 1024), help="start,end,n (default 150,1350,1024)")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("preprocess", help="AsLS baseline correction of a dataset cache")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--lambda", "--lam", dest="lam", type=float, default=1e5)
    s.add_argument("--p", type=float, default=1e-3)
    s.add_argument("--max-iter", type=int, default=20)
    s.add_argument("--tol", type=float, default=0.0)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train a Siamese model")
    s.add_argument("--config", help="flat key = value config file")
    s.add_argument("--model", help="output model file (default <out_dir>/model.ssnm)")
    s.add_argument("--report", help="training report CSV (default next to the model)")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="run an evaluation protocol and write a report CSV")
    s.add_argument("protocol", choices=["one-shot", "multiclass"])
    s.add_argument("--data", help="dataset cache (default: from config)")
    s.add_argument("--config")
    s.add_argument("--repeats", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--mode", choices=["siamese", "classifier"])
    s.add_argument("--out", required=True, help="report CSV: '#' header with mean/std, then method,run,seed,macro_f1,accuracy,n_queries")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("db", help="manage a reference database")
    dsub = s.add_subparsers(dest="db_command", required=True, parser_class=_Parser)
    a = dsub.add_parser("add", help="embed and add references (creates the db if missing)")
    a.add_argument("--db", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--spectrum", help="one RRUFF text file")
    a.add_argument("--class-id", type=int)
    a.add_argument("--data", help="dataset cache; adds every spectrum")
    a.add_argument("--classes", help="comma-separated class ids to take from --data")
    a.add_argument("--asls", action="store_true", help="baseline-correct --spectrum before adding")
    a.set_defaults(func=cmd_db)
    r = dsub.add_parser("remove", help="remove classes")
    r.add_argument("--db", required=True)
    r.add_argument("--class-id", type=int, action="append", required=True)
    r.set_defaults(func=cmd_db)
    li = dsub.add_parser("list", help="list classes as TSV")
    li.add_argument("--db", required=True)
    li.set_defaults(func=cmd_db)

    s = sub.add_parser("match", help="rank database classes for a query spectrum (TSV)")
    s.add_argument("--db", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--query", required=True, help="RRUFF text file")
    s.add_argument("--top", type=int, default=5)
    s.add_argument("--knn", type=int, default=1, help="k for the k-NN vote (default 1)")
    s.add_argument("--asls", action="store_true", help="baseline-correct the query")
    s.set_defaults(func=cmd_match)

    s = sub.add_parser("export-features", help="write learned features as CSV")
    s.add_argument("--model", required=True)
    s.add_argument("--db")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("pipeline", help="data -> preprocess -> train -> db -> eval")
    s.add_argument("--config")
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--dry-run", action="store_true", help="print the stage plan and write nothing")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SpecMatchError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
