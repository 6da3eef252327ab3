"""Flat ``key = value`` configuration files.

Blank lines and lines starting with ``#`` are ignored. Values are typed by
the field they set: booleans accept ``true/false/yes/no/1/0``, ``none``
clears optional fields, ``inf`` disables the learning-rate halving.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .preprocess import AslsConfig
from .repro import derive_seed
from .sampler import SplitSpec
from .spectra_io import Grid
from .trainer import TrainConfig

__all__ = ["AppConfig", "parse_config_text", "load_config"]


@dataclass(frozen=True)
class AppConfig:
    """Every setting of a pipeline run.

    Data comes from ``data_dir`` (RRUFF text files), from an existing
    ``data`` cache, or, when neither is set, from the synthetic generator.
    """

    # paths
    data_dir: str | None = None
    data: str | None = None
    out_dir: str = "specmatch-out"
    # synthetic data
    synthetic_classes: int = 10
    synthetic_samples: int = 6
    synthetic_baseline_scale: float = 1.0
    synthetic_noise: float = 0.02
    # grid
    grid_start: float = 150.0
    grid_end: float = 1350.0
    grid_n: int = 1024
    # preprocessing
    preprocess: bool = False
    asls_lam: float = 1e5
    asls_p: float = 1e-3
    asls_max_iter: int = 20
    asls_tol: float = 0.0
    # training
    seed: int = 0
    epochs: int = 30
    base_lr: float = 1e-3
    lr_halving_period: float | None = 10.0
    batch_size: int = 64
    early_stop_patience: int = 5
    augment: bool = False
    use_bias: bool = True
    val_pairs: int = 2000
    pairs_per_epoch: int | None = None
    split_train: float = 0.5
    split_val: float = 0.1
    split_test: float = 0.4
    # evaluation
    protocol: str = "one-shot"
    mode: str = "siamese"
    repeats: int = 5
    verbosity: int = 1

    def __post_init__(self):
        if self.protocol not in ("one-shot", "multiclass", "none"):
            raise ConfigError(f"protocol: expected one-shot, multiclass or none, got {self.protocol!r}")
        if self.mode not in ("siamese", "classifier"):
            raise ConfigError(f"mode: expected siamese or classifier, got {self.mode!r}")
        try:
            self.grid().validate()
            self.asls()
            self.train_config()
            self.split()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def grid(self) -> Grid:
        return Grid(self.grid_start, self.grid_end, self.grid_n)

    def asls(self) -> AslsConfig:
        return AslsConfig(self.asls_lam, self.asls_p, self.asls_max_iter, self.asls_tol)

    def split(self):
        return SplitSpec(self.split_train, self.split_val, self.split_test, derive_seed(self.seed, "split"))

    def train_config(self, seed=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            base_lr=self.base_lr,
            lr_halving_period=self.lr_halving_period,
            batch_size=self.batch_size,
            early_stop_patience=self.early_stop_patience,
            seed=derive_seed(self.seed, "train") if seed is None else seed,
            augment=self.augment,
            use_bias=self.use_bias,
            val_pairs=self.val_pairs,
            pairs_per_epoch=self.pairs_per_epoch,
        )

    def as_dict(self):
        return dataclasses.asdict(self)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _convert(name, raw, default, annotation):
    text = raw.strip()
    optional = "None" in str(annotation)
    if optional and text.lower() in ("none", ""):
        return None
    kind = str(annotation).replace(" | None", "")
    try:
        if kind == "bool":
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            v = float(text)
            if math.isnan(v):
                raise ValueError(text)
            return v
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


def parse_config_text(text, base: AppConfig | None = None) -> AppConfig:
    """Parse flat ``key = value`` text on top of ``base`` (defaults when
    None). Unknown keys and unparseable values raise ConfigError naming the
    key."""
    base = base or AppConfig()
    known = {f.name: f for f in fields(AppConfig)}
    values = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {no}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} (line {no})")
        f = known[key]
        values[key] = _convert(key, raw, getattr(base, key), f.type)
    return base.replace(**values)


def load_config(path, base: AppConfig | None = None) -> AppConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base)
