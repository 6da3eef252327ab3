"""Asymmetric least squares (AsLS) baseline correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .errors import NonFiniteInput, SolveFailure
from .spectra_io import Dataset, Spectrum, normalize_minmax

__all__ = ["AslsConfig", "asls_baseline", "correct", "correct_dataset", "second_difference_bands"]


@dataclass(frozen=True)
class AslsConfig:
    """AsLS parameters.

    ``lam`` weighs the second-difference roughness penalty, ``p`` is the
    weight given to points above the current baseline (``1 - p`` below).
    Iteration stops when at most ``tol`` (a fraction of points) of the
    weights flip, or after ``max_iter`` solves.
    """

    lam: float = 1e5
    p: float = 1e-3
    max_iter: int = 20
    tol: float = 0.0

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol < 0:
            raise ValueError("tol must be >= 0")


def second_difference_bands(n):
    """Diagonals ``(main, first, second)`` of ``D.T @ D`` for the
    ``(n-2, n)`` second-difference matrix ``D``."""
    ones = np.ones(n - 2)
    return (
        np.convolve(ones, [1.0, 4.0, 1.0]),
        np.convolve(ones, [-2.0, -2.0]),
        ones,
    )


def _solve(w, y, lam, bands, refine=2):
    d0, d1, d2 = bands
    n = y.size
    ab = np.zeros((3, n))
    ab[0, 2:] = lam * d2
    ab[1, 1:] = lam * d1
    ab[2] = w + lam * d0
    try:
        z = solveh_banded(ab, w * y, check_finite=False)
        # With most weights at p the system is ill conditioned (~1e9 for the
        # default settings); refine with residuals in extended precision.
        # the residual must use the float64 matrix actually factored
        main, first, second = (b.astype(np.longdouble) for b in (ab[2], ab[1, 1:], ab[0, 2:]))
        rhs = w.astype(np.longdouble) * y.astype(np.longdouble)
        for _ in range(refine):
            zl = z.astype(np.longdouble)
            az = main * zl
            az[:-1] += first * zl[1:]
            az[1:] += first * zl[:-1]
            az[:-2] += second * zl[2:]
            az[2:] += second * zl[:-2]
            res = (rhs - az).astype(float)
            z = z + solveh_banded(ab, res, check_finite=False)
    except LinAlgError as exc:
        raise SolveFailure(str(exc)) from exc
    return z


def asls_baseline(y, cfg: AslsConfig = AslsConfig(), return_info=False):
    """Estimate a smooth baseline underneath the peaks of ``y``.

    Minimizes ``sum(w * (y - z)**2) + lam * sum(diff(z, 2)**2)`` by
    reweighting: points above the fit get weight ``p``, points at or below
    it ``1 - p``, starting from uniform weights.

    Parameters
    ----------
    y : array_like, shape (L,)
    cfg : AslsConfig

    Returns
    -------
    z : numpy.ndarray, shape (L,)
    info : dict
        Only when ``return_info``; holds ``weights`` and ``n_iter``.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or y.size < 3:
        raise ValueError("asls_baseline needs a 1-D signal with at least 3 points")
    if not np.all(np.isfinite(y)):
        raise NonFiniteInput("asls_baseline got non-finite values")
    # Constants and straight lines zero the roughness penalty, so they are
    # their own baseline; the solve would only add round-off amplified by
    # the conditioning of the system.
    if np.max(np.abs(np.diff(y, 2))) <= 16 * np.finfo(float).eps * np.max(np.abs(y)):
        z = y.copy()
        return (z, {"weights": np.ones_like(y), "n_iter": 0}) if return_info else z
    bands = second_difference_bands(y.size)
    w = np.ones_like(y)
    max_flips = cfg.tol * y.size
    for it in range(1, cfg.max_iter + 1):
        z = _solve(w, y, cfg.lam, bands)
        w_new = np.where(y > z, cfg.p, 1.0 - cfg.p)
        flips = np.count_nonzero(w_new != w)
        if flips <= max_flips:
            break
        w = w_new
    if return_info:
        return z, {"weights": w, "n_iter": it}
    return z


def _flatten_residual(y, z):
    r = y - z
    scale = max(1.0, float(np.max(np.abs(y))))
    if np.ptp(r) <= 1e-9 * scale:
        return np.zeros_like(r)
    return normalize_minmax(r)


def correct(s: Spectrum, cfg: AslsConfig = AslsConfig()) -> Spectrum:
    """Subtract the AsLS baseline and min-max normalize.

    Residuals that are flat to within round-off map to all zeros.
    """
    y = s.intensities
    return s.replace(intensities=_flatten_residual(y, asls_baseline(y, cfg)))


def correct_dataset(dataset: Dataset, cfg: AslsConfig = AslsConfig()) -> Dataset:
    return Dataset((correct(s, cfg) for s in dataset), dataset.class_names)
