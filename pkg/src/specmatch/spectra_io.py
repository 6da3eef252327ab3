"""Spectrum ingestion: RRUFF text parsing, gridding, scaling, augmentation,
synthetic data and the binary dataset cache."""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import (
    EmptySpectrum,
    FormatError,
    InvalidGrid,
    MalformedLine,
    NonFiniteInput,
    NonMonotonicGrid,
)

__all__ = [
    "RawSpectrum",
    "Grid",
    "Spectrum",
    "Dataset",
    "AugmentPolicy",
    "parse_rruff",
    "read_rruff",
    "serialize_rruff",
    "resample",
    "normalize_minmax",
    "spectrum_from_raw",
    "apply_augmentation",
    "augment",
    "augment_batch",
    "synth_dataset",
    "write_cache",
    "read_cache",
    "DEFAULT_GRID",
]


@dataclass(frozen=True)
class RawSpectrum:
    """Measured spectrum on its native wavenumber axis."""

    wavenumbers: np.ndarray
    intensities: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.asarray(self.wavenumbers, dtype=float)
        y = np.asarray(self.intensities, dtype=float)
        if w.shape != y.shape or w.ndim != 1:
            raise ValueError("wavenumbers and intensities must be 1-D of equal length")
        if w.size < 2:
            raise EmptySpectrum(f"need at least 2 points, got {w.size}")
        if np.any(np.diff(w) <= 0):
            raise NonMonotonicGrid("wavenumbers must be strictly increasing")
        object.__setattr__(self, "wavenumbers", w)
        object.__setattr__(self, "intensities", y)

    @property
    def points(self):
        return list(zip(self.wavenumbers.tolist(), self.intensities.tolist()))

    def __len__(self):
        return self.wavenumbers.size


class Grid(NamedTuple):
    """Uniform wavenumber grid: ``n`` points from ``start`` to ``end`` inclusive."""

    start: float
    end: float
    n: int

    def validate(self):
        if self.n < 2 or not self.start < self.end:
            raise InvalidGrid(f"invalid grid {tuple(self)}")
        return self

    def points(self):
        self.validate()
        return np.linspace(self.start, self.end, self.n)

    @property
    def step(self):
        return (self.end - self.start) / (self.n - 1)


DEFAULT_GRID = Grid(150.0, 1350.0, 1024)


@dataclass(frozen=True, eq=False)
class Spectrum:
    intensities: np.ndarray
    class_id: int
    sample_id: str
    grid: Grid = DEFAULT_GRID

    def __post_init__(self):
        v = np.array(self.intensities, dtype=float)
        if v.ndim != 1:
            raise ValueError("intensities must be 1-D")
        if not np.all(np.isfinite(v)):
            raise NonFiniteInput(f"spectrum {self.sample_id} has non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "intensities", v)
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "grid", Grid(*self.grid))

    def __len__(self):
        return self.intensities.size

    def replace(self, intensities=None, class_id=None, sample_id=None):
        return Spectrum(
            self.intensities if intensities is None else intensities,
            self.class_id if class_id is None else class_id,
            self.sample_id if sample_id is None else sample_id,
            self.grid,
        )


class Dataset:
    """Immutable collection of spectra on one grid.

    Parameters
    ----------
    spectra : iterable of Spectrum
        All spectra must share a length.
    class_names : dict, optional
        Human readable name per ``class_id``.
    """

    def __init__(self, spectra: Iterable[Spectrum], class_names: dict | None = None):
        self._spectra = tuple(spectra)
        lengths = {len(s) for s in self._spectra}
        if len(lengths) > 1:
            raise ValueError(f"spectra have mixed lengths {sorted(lengths)}")
        index: dict[int, list[int]] = {}
        for i, s in enumerate(self._spectra):
            index.setdefault(s.class_id, []).append(i)
        self._class_index = {c: tuple(ix) for c, ix in sorted(index.items())}
        self.class_names = dict(class_names or {})
        self._matrix = None

    @property
    def spectra(self):
        return self._spectra

    @property
    def class_index(self):
        return self._class_index

    @property
    def class_ids(self):
        return list(self._class_index)

    @property
    def grid(self):
        return self._spectra[0].grid if self._spectra else DEFAULT_GRID

    @property
    def length(self):
        return len(self._spectra[0]) if self._spectra else 0

    def __len__(self):
        return len(self._spectra)

    def __getitem__(self, i):
        return self._spectra[i]

    def __iter__(self):
        return iter(self._spectra)

    def matrix(self, dtype=np.float64):
        """All intensities stacked into an ``(n_samples, L)`` array."""
        if self._matrix is None:
            if self._spectra:
                m = np.stack([s.intensities for s in self._spectra])
            else:
                m = np.zeros((0, 0))
            m.setflags(write=False)
            self._matrix = m
        return self._matrix.astype(dtype, copy=False)

    def labels(self):
        return np.array([s.class_id for s in self._spectra], dtype=np.int64)

    def sample_ids(self):
        return [s.sample_id for s in self._spectra]

    def subset(self, class_ids):
        keep = set(class_ids)
        return Dataset(
            (s for s in self._spectra if s.class_id in keep),
            {c: n for c, n in self.class_names.items() if c in keep},
        )

    def select(self, indices):
        return Dataset((self._spectra[i] for i in indices), self.class_names)

    def map(self, fn):
        """Apply ``fn`` to every intensity vector, keeping labels."""
        return Dataset(
            (s.replace(intensities=fn(s.intensities)) for s in self._spectra),
            self.class_names,
        )


# --------------------------------------------------------------------------
# RRUFF text format


def parse_rruff(text) -> RawSpectrum:
    """Parse a RRUFF-style text spectrum.

    Header lines look like ``##KEY=VALUE``; data lines are
    ``wavenumber, intensity``. Parsing stops at ``##END=``.

    Parameters
    ----------
    text : str or file-like

    Returns
    -------
    RawSpectrum
    """
    if not isinstance(text, str):
        text = text.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")
    metadata = {}
    wavenumbers = []
    intensities = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("##"):
            key, _, value = line[2:].partition("=")
            key = key.strip()
            if key.upper() == "END":
                break
            metadata[key] = value.strip()
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise MalformedLine(line_no, line)
        try:
            w, y = float(parts[0]), float(parts[1])
        except ValueError:
            raise MalformedLine(line_no, line) from None
        if not (math.isfinite(w) and math.isfinite(y)):
            raise MalformedLine(line_no, line)
        wavenumbers.append(w)
        intensities.append(y)
    if len(wavenumbers) < 2:
        raise EmptySpectrum(f"found {len(wavenumbers)} data points, need at least 2")
    return RawSpectrum(np.array(wavenumbers), np.array(intensities), metadata)


def read_rruff(path) -> RawSpectrum:
    with open(path, encoding="utf-8", errors="replace", newline="") as fh:
        return parse_rruff(fh.read())


def serialize_rruff(raw: RawSpectrum) -> str:
    out = io.StringIO()
    for key, value in raw.metadata.items():
        out.write(f"##{key}={value}\n")
    for w, y in zip(raw.wavenumbers.tolist(), raw.intensities.tolist()):
        out.write(f"{w!r}, {y!r}\n")
    out.write("##END=\n")
    return out.getvalue()


# --------------------------------------------------------------------------
# gridding and scaling


def resample(raw: RawSpectrum, grid) -> np.ndarray:
    """Linearly interpolate ``raw`` onto ``grid``; outside the measured span the
    nearest endpoint value is used."""
    grid = Grid(*grid).validate()
    return np.interp(grid.points(), raw.wavenumbers, raw.intensities)


def normalize_minmax(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput("normalize_minmax got non-finite values")
    lo = v.min()
    span = v.max() - lo
    if span == 0:
        return np.zeros_like(v)
    return (v - lo) / span


def spectrum_from_raw(raw: RawSpectrum, grid, class_id: int, sample_id: str) -> Spectrum:
    grid = Grid(*grid)
    return Spectrum(normalize_minmax(resample(raw, grid)), class_id, sample_id, grid)


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentPolicy:
    """Random perturbations applied to training spectra.

    ``max_shift`` is in bins, ``noise_sigma`` a fraction of the spectrum's
    peak intensity and ``scale_range`` bounds a global intensity factor.
    """

    max_shift: int = 16
    noise_sigma: float = 0.02
    scale_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.max_shift < 0 or self.noise_sigma < 0 or not 0 < lo <= hi:
            raise ValueError(f"invalid augmentation policy {self}")
        object.__setattr__(self, "max_shift", int(self.max_shift))
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    @classmethod
    def off(cls):
        return cls(0, 0.0, (1.0, 1.0))


def _shift_rows(x, shifts):
    out = np.zeros_like(x)
    n = x.shape[1]
    for i, k in enumerate(shifts):
        k = int(k)
        if k >= n or k <= -n:
            continue
        if k >= 0:
            out[i, k:] = x[i, : n - k]
        else:
            out[i, : n + k] = x[i, -k:]
    return out


def _renormalize_rows(x):
    lo = x.min(axis=1, keepdims=True)
    span = x.max(axis=1, keepdims=True) - lo
    safe = np.where(span == 0, 1.0, span)
    return np.where(span == 0, 0.0, (x - lo) / safe)


def apply_augmentation(x, shift=0, noise=None, scale=1.0) -> np.ndarray:
    """Deterministic transform used by :func:`augment`.

    Shift right by ``shift`` bins with zero fill, add the ``noise`` vector,
    multiply by ``scale``. The result is min-max renormalized only when the
    intensities were actually perturbed (noise or a scale other than 1).
    """
    x = np.asarray(x, dtype=float)
    y = _shift_rows(x[None, :], [shift])[0]
    perturbed = False
    if noise is not None and np.any(noise != 0):
        y = y + noise
        perturbed = True
    if scale != 1.0:
        y = y * scale
        perturbed = True
    return normalize_minmax(y) if perturbed else y


def augment_batch(x, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Vectorized augmentation of an ``(n, L)`` array of spectra."""
    x = np.asarray(x)
    n = x.shape[0]
    shifts = rng.integers(-policy.max_shift, policy.max_shift + 1, size=n)
    peak = np.abs(x).max(axis=1, keepdims=True)
    noise = rng.standard_normal(x.shape) * (policy.noise_sigma * peak)
    scale = rng.uniform(*policy.scale_range, size=(n, 1))
    y = _shift_rows(x, shifts)
    perturbed = policy.noise_sigma > 0 or policy.scale_range != (1.0, 1.0)
    if not perturbed:
        return y.astype(x.dtype, copy=False)
    y = (y + noise) * scale
    return _renormalize_rows(y).astype(x.dtype, copy=False)


def augment(s: Spectrum, policy: AugmentPolicy, rng_seed) -> Spectrum:
    rng = np.random.default_rng(rng_seed)
    y = augment_batch(s.intensities[None, :], policy, rng)[0]
    return s.replace(intensities=y)


# --------------------------------------------------------------------------
# synthetic data


def synth_dataset(
    n_classes: int,
    samples_per_class: int,
    peak_count_range=(3, 8),
    baseline_degree: int | None = 3,
    rng_seed=0,
    *,
    noise: float = 0.01,
    baseline_scale: float = 1.0,
    peak_width_range=(2.0, 10.0),
    peak_jitter: float = 0.0,
    spike_rate: float = 0.0,
    grid=DEFAULT_GRID,
) -> Dataset:
    """Random Gaussian-peak spectra on polynomial backgrounds.

    Each class owns a fixed set of peaks. Every sample adds its own random
    polynomial background of degree ``baseline_degree`` (None disables it)
    with peak-to-peak amplitude ``baseline_scale`` times the tallest peak,
    plus white noise of standard deviation ``noise`` times the tallest peak.
    ``peak_jitter`` moves each peak centre by a random number of bins with
    that standard deviation. ``spike_rate`` is the mean number of
    single-bin cosmic-ray spikes per sample (Poisson), each 0.5 to 3 times
    the tallest peak. Output spectra are min-max normalized.
    """
    if n_classes < 2 or samples_per_class < 1:
        raise ValueError("need n_classes >= 2 and samples_per_class >= 1")
    grid = Grid(*grid).validate()
    n = grid.n
    rng = np.random.default_rng(rng_seed)
    idx = np.arange(n, dtype=float)
    u = np.linspace(-1.0, 1.0, n)
    lo_p, hi_p = peak_count_range
    spectra = []
    for c in range(n_classes):
        k = int(rng.integers(lo_p, hi_p + 1))
        centres = rng.uniform(0.05 * n, 0.95 * n, size=k)
        widths = rng.uniform(*peak_width_range, size=k)
        heights = rng.uniform(0.2, 1.0, size=k)
        heights[rng.integers(k)] = 1.0
        for j in range(samples_per_class):
            jitter = rng.normal(0.0, peak_jitter, size=k) if peak_jitter > 0 else 0.0
            mu = centres + jitter
            peaks = (heights[:, None] * np.exp(-0.5 * ((idx[None, :] - mu[:, None]) / widths[:, None]) ** 2)).sum(0)
            y = peaks
            if baseline_degree is not None:
                coef = rng.standard_normal(baseline_degree + 1)
                base = np.polynomial.legendre.legval(u, coef)
                span = np.ptp(base)
                if span > 0:
                    base = (base - base.min()) / span * baseline_scale * rng.uniform(0.5, 1.5)
                else:
                    base = np.full(n, abs(coef[0]))
                y = y + base
            y = y + rng.standard_normal(n) * noise
            if spike_rate > 0:
                n_spikes = int(rng.poisson(spike_rate))
                y[rng.integers(0, n, n_spikes)] += rng.uniform(0.5, 3.0, n_spikes)
            spectra.append(Spectrum(normalize_minmax(y), c, f"syn-c{c:04d}-s{j:03d}", grid))
    return Dataset(spectra, {c: f"class-{c:04d}" for c in range(n_classes)})


# --------------------------------------------------------------------------
# dataset cache

CACHE_MAGIC = b"SPCD"
CACHE_VERSION = 1


def write_cache(dataset: Dataset, path, stamp: dict | None = None) -> None:
    """Write ``dataset`` to the little-endian "SPCD" cache format.

    Layout: magic, int32 version, float64 start/end/step, uint32 L,
    uint32-length-prefixed UTF-8 JSON metadata (class names and the
    reproducibility stamp), then per spectrum: int32 class_id,
    uint32-length-prefixed UTF-8 sample_id, L float32 intensities.
    """
    grid = dataset.grid
    n = dataset.length if len(dataset) else grid.n
    meta = {
        "class_names": {str(k): v for k, v in sorted(dataset.class_names.items())},
        "stamp": stamp or {},
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CACHE_MAGIC)
    buf.write(struct.pack("<i3dI", CACHE_VERSION, grid.start, grid.end, grid.step, n))
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)
    for s in dataset:
        sid = s.sample_id.encode("utf-8")
        buf.write(struct.pack("<iI", s.class_id, len(sid)))
        buf.write(sid)
        buf.write(s.intensities.astype("<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_cache(path) -> Dataset:
    data = Path(path).read_bytes()
    if data[:4] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a dataset cache")
    pos = 4
    version, start, end, _step, n = struct.unpack_from("<i3dI", data, pos)
    pos += struct.calcsize("<i3dI")
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(data[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    grid = Grid(start, end, n)
    spectra = []
    try:
        while pos < len(data):
            class_id, sid_len = struct.unpack_from("<iI", data, pos)
            pos += 8
            sid = data[pos : pos + sid_len].decode("utf-8")
            pos += sid_len
            values = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(float)
            pos += 4 * n
            spectra.append(Spectrum(values, class_id, sid, grid))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated record") from exc
    names = {int(k): v for k, v in meta.get("class_names", {}).items()}
    ds = Dataset(spectra, names)
    ds.stamp = meta.get("stamp", {})
    return ds
