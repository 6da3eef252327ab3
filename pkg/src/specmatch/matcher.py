"""Dynamic reference database, one-shot matching and nearest-neighbour
baselines.

A :class:`ReferenceDB` caches the feature vector of every reference at
insert time, so matching a query costs one twin forward pass plus
``D``-dimensional arithmetic per reference. Adding or removing classes never
touches the other entries.
"""

from __future__ import annotations

import csv
import io
import json
import struct
import threading
import zlib
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyDB, FormatError, ModelMismatch, ShapeMismatch, UnknownClass, ZeroVector
from .siamese import SiameseModel, _open_sigmoid, snapshot_id
from .spectra_io import DEFAULT_GRID, Grid, Spectrum

__all__ = [
    "Entry",
    "MatchResult",
    "ReferenceDB",
    "db_add",
    "db_add_many",
    "db_remove",
    "build_db",
    "match_one_shot",
    "match_many",
    "match_baseline",
    "nn_baseline_predict",
    "export_features",
    "db_bytes",
    "save_db",
    "load_db",
]


class _RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass(frozen=True)
class Entry:
    feature: np.ndarray
    spectrum: Spectrum
    sample_id: str


@dataclass(frozen=True)
class MatchResult:
    """Classes ranked by score (descending, ties by ascending class id).

    ``predicted`` is the first ranked class, except for k-NN votes where it
    is the vote winner.
    """

    ranking: tuple
    predicted: int

    @property
    def classes(self):
        return [c for c, _ in self.ranking]

    @property
    def scores(self):
        return [s for _, s in self.ranking]


class ReferenceDB:
    """Class id -> list of :class:`Entry`, tied to one model snapshot.

    Parameters
    ----------
    snapshot : int
        :func:`~specmatch.siamese.snapshot_id` of the model that produced
        the stored features.
    dim, length : int
        Feature dimension and spectrum length.
    """

    def __init__(self, snapshot, dim, length, grid=DEFAULT_GRID, stamp=None):
        self.snapshot = int(snapshot)
        self.dim = int(dim)
        self.length = int(length)
        self.grid = Grid(*grid)
        self.stamp = dict(stamp or {})
        self.entries: dict[int, list[Entry]] = {}
        self.lock = _RWLock()
        self._stacked = None

    @classmethod
    def for_model(cls, model: SiameseModel, grid=DEFAULT_GRID, stamp=None):
        return cls(snapshot_id(model), model.dim, model.length, grid, stamp)

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def __contains__(self, class_id):
        return int(class_id) in self.entries

    @property
    def class_ids(self):
        return sorted(self.entries)

    def iter_entries(self):
        """``(class_id, entry)`` in ascending class order, insertion order
        within a class."""
        for c in sorted(self.entries):
            for e in self.entries[c]:
                yield c, e

    def _stack(self):
        # snapshot of the entry table for vectorized matching; rebuilt lazily
        if self._stacked is None:
            rows = list(self.iter_entries())
            labels = np.array([c for c, _ in rows], dtype=np.int64)
            feats = np.array([e.feature for _, e in rows]).reshape(len(rows), self.dim)
            raw = np.array([e.spectrum.intensities for _, e in rows]).reshape(len(rows), self.length)
            self._stacked = (labels, feats, raw)
        return self._stacked


def _check_model(db: ReferenceDB, model: SiameseModel):
    if snapshot_id(model) != db.snapshot:
        raise ModelMismatch(f"database was embedded with snapshot {db.snapshot:#010x}, model differs")


def _as_spectrum(s, class_id, sample_id, grid):
    if isinstance(s, Spectrum):
        return s.replace(class_id=class_id, sample_id=sample_id or s.sample_id)
    return Spectrum(np.asarray(s, dtype=float), class_id, sample_id or "", grid)


def db_add(db: ReferenceDB, class_id, spectrum, model: SiameseModel, sample_id=None):
    """Embed ``spectrum`` (one eval-mode forward pass) and append it under
    ``class_id``. Returns ``db``."""
    return db_add_many(db, [class_id], [spectrum], model, [sample_id])


def db_add_many(db: ReferenceDB, class_ids, spectra, model: SiameseModel, sample_ids=None):
    """Add several references, one eval-mode forward pass each.

    Embedding spectra one at a time keeps every stored feature independent
    of which other spectra arrived in the same call, so removing and
    re-adding a reference restores it bit for bit.
    """
    _check_model(db, model)
    class_ids = [int(c) for c in class_ids]
    sample_ids = list(sample_ids) if sample_ids is not None else [None] * len(class_ids)
    specs = [_as_spectrum(s, c, sid, db.grid) for s, c, sid in zip(spectra, class_ids, sample_ids)]
    if not specs:
        return db
    if any(len(s) != db.length for s in specs):
        raise ShapeMismatch(f"database holds length-{db.length} spectra")
    feats = [model.embed_batch(s.intensities[None, :])[0] for s in specs]
    with db.lock.write():
        for s, f in zip(specs, feats):
            f = f.copy()
            f.setflags(write=False)
            db.entries.setdefault(s.class_id, []).append(Entry(f, s, s.sample_id))
        db._stacked = None
    return db


def db_remove(db: ReferenceDB, class_id):
    """Drop every reference of ``class_id``. Returns ``db``."""
    with db.lock.write():
        if int(class_id) not in db.entries:
            raise UnknownClass(f"class {class_id} is not in the database")
        del db.entries[int(class_id)]
        db._stacked = None
    return db


def build_db(model: SiameseModel, references, stamp=None):
    """New database holding the spectra of ``references`` (a Dataset or a
    sequence of Spectrum)."""
    refs = list(references)
    grid = refs[0].grid if refs else DEFAULT_GRID
    db = ReferenceDB.for_model(model, grid, stamp)
    return db_add_many(db, [s.class_id for s in refs], refs, model, [s.sample_id for s in refs])


def _rank(labels, keys, scores):
    """Per-class best ``keys`` (higher is better), ranked descending with
    ascending class id on ties. ``scores`` are reported alongside."""
    classes = np.unique(labels)
    best = np.full(classes.size, -np.inf)
    best_score = np.zeros(classes.size)
    pos = np.searchsorted(classes, labels)
    for i, k in enumerate(keys):
        if k > best[pos[i]]:
            best[pos[i]] = k
            best_score[pos[i]] = scores[i]
    order = np.lexsort((classes, -best))
    return tuple((int(classes[i]), float(best_score[i])) for i in order)


def _vote(labels, keys, k):
    """Majority class among the ``k`` best references; ties go to the class
    with the best single reference."""
    order = np.lexsort((labels, -keys))[:k]
    top, counts = np.unique(labels[order], return_counts=True)
    tied = set(top[counts == counts.max()].tolist())
    for i in order:
        if int(labels[i]) in tied:
            return int(labels[i])
    raise AssertionError("unreachable")


def _result(labels, keys, scores, k):
    ranking = _rank(labels, keys, scores)
    predicted = ranking[0][0] if k <= 1 else _vote(labels, keys, k)
    return MatchResult(ranking, predicted)


def match_one_shot(db: ReferenceDB, query, model: SiameseModel, k=1) -> MatchResult:
    """Rank the classes of ``db`` by learned similarity to ``query``.

    The score of a reference is ``sigmoid(w . |f(q) - f(r)| + b)``; a class
    scores the maximum over its references. Ordering uses the logit, which
    keeps references distinguishable where the sigmoid rounds to 1.
    """
    return match_many(db, [query], model, k)[0]


def match_many(db: ReferenceDB, queries, model: SiameseModel, k=1):
    """:func:`match_one_shot` for a batch of queries (one forward pass)."""
    _check_model(db, model)
    x = np.array([q.intensities if isinstance(q, Spectrum) else np.asarray(q, dtype=float) for q in queries])
    with db.lock.read():
        if len(db) == 0:
            raise EmptyDB("reference database is empty")
        labels, feats, _ = db._stack()
    fq = model.embed_batch(x)
    out = []
    for f in fq:
        z = model.logits(f[None, :], feats).astype(float)
        out.append(_result(labels, z, _open_sigmoid(z), k))
    return out


def _baseline_keys(refs, q, metric):
    if metric == "l2":
        d = np.sqrt(np.sum((refs - q) ** 2, axis=1))
        return -d, d
    if metric == "cosine":
        nq = np.linalg.norm(q)
        nr = np.linalg.norm(refs, axis=1)
        if nq == 0 or np.any(nr == 0):
            raise ZeroVector("cosine similarity is undefined for an all-zero spectrum")
        c = refs @ q / (nr * nq)
        return c, c
    raise ValueError(f"unknown metric {metric!r}; use 'l2' or 'cosine'")


def match_baseline(db: ReferenceDB, query, metric="l2", k=1) -> MatchResult:
    """Nearest reference by L2 distance (ascending) or cosine similarity
    (descending) on the stored intensity vectors. For L2 the reported
    scores are distances."""
    q = query.intensities if isinstance(query, Spectrum) else np.asarray(query, dtype=float)
    with db.lock.read():
        if len(db) == 0:
            raise EmptyDB("reference database is empty")
        labels, _, raw = db._stack()
    keys, scores = _baseline_keys(raw, q, metric)
    if metric == "l2":
        # rank by ascending distance; report distances
        ranking = _rank(labels, keys, scores)
        predicted = ranking[0][0] if k <= 1 else _vote(labels, keys, k)
        return MatchResult(ranking, predicted)
    return _result(labels, keys, scores, k)


def nn_baseline_predict(ref_x, ref_labels, query_x, metric="l2"):
    """Vectorized 1-NN predictions: the label of the best reference for
    every query row (ties go to the lowest reference index)."""
    ref_x = np.asarray(ref_x, dtype=float)
    query_x = np.asarray(query_x, dtype=float)
    ref_labels = np.asarray(ref_labels)
    if len(ref_x) == 0:
        raise EmptyDB("no references")
    if metric == "l2":
        d2 = (query_x**2).sum(1)[:, None] - 2 * query_x @ ref_x.T + (ref_x**2).sum(1)[None, :]
        best = np.argmin(d2, axis=1)
    elif metric == "cosine":
        nq = np.linalg.norm(query_x, axis=1)
        nr = np.linalg.norm(ref_x, axis=1)
        if np.any(nq == 0) or np.any(nr == 0):
            raise ZeroVector("cosine similarity is undefined for an all-zero spectrum")
        best = np.argmax((query_x @ ref_x.T) / nr[None, :], axis=1)
    else:
        raise ValueError(f"unknown metric {metric!r}; use 'l2' or 'cosine'")
    return ref_labels[best]


def export_features(source, model: SiameseModel, sink, stamp=None):
    """Write ``sample_id,class_id,f_1..f_D`` rows (no header).

    ``source`` is a Dataset, a sequence of Spectrum or a ReferenceDB (whose
    cached features are written as stored). ``sink`` is a path or a text
    file object. An optional ``stamp`` mapping is written first as a ``#``
    comment line. Returns the number of rows.
    """
    if isinstance(source, ReferenceDB):
        with source.lock.read():
            rows = [(e.sample_id, c, e.feature) for c, e in source.iter_entries()]
    else:
        spectra = list(source)
        feats = model.embed_batch(np.array([s.intensities for s in spectra])) if spectra else []
        rows = [(s.sample_id, s.class_id, f) for s, f in zip(spectra, feats)]
    buf = io.StringIO()
    if stamp:
        buf.write("# " + " ".join(f"{k}={v}" for k, v in sorted(stamp.items())) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    for sid, c, f in rows:
        w.writerow([sid, int(c)] + [repr(float(v)) for v in f])
    if hasattr(sink, "write"):
        sink.write(buf.getvalue())
    else:
        Path(sink).write_text(buf.getvalue())
    return len(rows)


# --------------------------------------------------------------------------
# "SPDB" database files

DB_MAGIC = b"SPDB"
DB_VERSION = 1


def db_bytes(db: ReferenceDB) -> bytes:
    """Serialize: magic, uint32 version, uint32 model snapshot id, uint32 D,
    uint32 L, float64 grid start and end, uint32-length JSON stamp, uint32
    entry count, then per entry int32 class id, uint32-length UTF-8 sample
    id, D float32 features, L float64 intensities; CRC-32 trailer."""
    stamp = json.dumps(db.stamp, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DB_MAGIC)
    buf.write(struct.pack("<IIII", DB_VERSION, db.snapshot, db.dim, db.length))
    buf.write(struct.pack("<dd", db.grid.start, db.grid.end))
    buf.write(struct.pack("<I", len(stamp)) + stamp)
    with db.lock.read():
        rows = list(db.iter_entries())
        buf.write(struct.pack("<I", len(rows)))
        for c, e in rows:
            sid = e.sample_id.encode("utf-8")
            buf.write(struct.pack("<iI", c, len(sid)) + sid)
            buf.write(np.asarray(e.feature, dtype="<f4").tobytes())
            buf.write(np.asarray(e.spectrum.intensities, dtype="<f8").tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def save_db(db: ReferenceDB, path):
    Path(path).write_bytes(db_bytes(db))


def load_db(path_or_bytes) -> ReferenceDB:
    data = path_or_bytes if isinstance(path_or_bytes, (bytes, bytearray)) else Path(path_or_bytes).read_bytes()
    if data[:4] != DB_MAGIC or len(data) < 40:
        raise FormatError("not an SPDB database file")
    payload, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError("database checksum mismatch")
    version, snap, dim, length = struct.unpack_from("<IIII", data, 4)
    if version != DB_VERSION:
        raise FormatError(f"unsupported database version {version}")
    start, end = struct.unpack_from("<dd", data, 20)
    (n_stamp,) = struct.unpack_from("<I", data, 36)
    pos = 40
    stamp = json.loads(data[pos : pos + n_stamp].decode("utf-8"))
    pos += n_stamp
    db = ReferenceDB(snap, dim, length, Grid(start, end, length), stamp)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    for _ in range(n):
        c, n_sid = struct.unpack_from("<iI", data, pos)
        pos += 8
        sid = data[pos : pos + n_sid].decode("utf-8")
        pos += n_sid
        f = np.frombuffer(data, "<f4", dim, pos).astype(np.float32)
        pos += 4 * dim
        x = np.frombuffer(data, "<f8", length, pos).astype(float)
        pos += 8 * length
        f.setflags(write=False)
        db.entries.setdefault(c, []).append(Entry(f, Spectrum(x, c, sid, db.grid), sid))
    if pos != len(payload):
        raise FormatError("database file length does not match its entry count")
    return db
