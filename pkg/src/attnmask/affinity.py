"""Seeded affinity propagation over image color structure.

High-confidence attention pixels become foreground seeds, low-confidence
pixels background seeds, and everything in between is solved as a harmonic
function on the 8-connected pixel graph with color-similarity edge weights
(a random-walk labeling). The solver is plain Gauss-Seidel: sweep neutral
pixels in row-major order, replacing each value by the weighted mean of
its neighbors, until the largest per-pixel change in a sweep drops below
the tolerance.
"""

from __future__ import annotations

import logging
import os

import numpy as np
from numba import njit

from .errors import ValidationError
from .rasters import load_binary_mask

log = logging.getLogger(__name__)

BG_SEED = 0
FG_SEED = 1
NEUTRAL = 2

THETA_HI = 0.6
THETA_LO = 0.2
SIGMA_C = 30.0
TOL = 1e-4
MAX_ITER = 500

_NEIGHBORS = tuple(
    (dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)
)


def extract_seeds(
    values: np.ndarray,
    theta_hi: float = THETA_HI,
    theta_lo: float = THETA_LO,
) -> np.ndarray:
    """Seed map from an aggregated map: 1 above theta_hi, 0 below theta_lo, 2 between."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"map must be 2-dimensional, got shape {arr.shape}")
    theta_hi = float(theta_hi)
    theta_lo = float(theta_lo)
    if not 0.0 < theta_lo < theta_hi < 1.0:
        raise ValidationError(
            f"need 0 < theta_lo < theta_hi < 1, got lo={theta_lo} hi={theta_hi}"
        )
    seeds = np.full(arr.shape, NEUTRAL, dtype=np.uint8)
    seeds[arr >= theta_hi] = FG_SEED
    seeds[arr <= theta_lo] = BG_SEED
    return seeds


@njit(cache=False)
def _gauss_seidel(
    f: np.ndarray,
    pixels: np.ndarray,
    nbr_index: np.ndarray,
    nbr_weight: np.ndarray,
    tol: float,
    max_iter: int,
):
    """Row-major sweeps over the neutral pixels; returns (sweeps, last residual)."""
    delta = 0.0
    for sweep in range(max_iter):
        delta = 0.0
        for k in range(pixels.shape[0]):
            num = 0.0
            den = 0.0
            for m in range(nbr_index.shape[1]):
                j = nbr_index[k, m]
                if j >= 0:
                    w = nbr_weight[k, m]
                    num += w * f[j]
                    den += w
            if den > 0.0:
                new = num / den
                change = abs(new - f[pixels[k]])
                if change > delta:
                    delta = change
                f[pixels[k]] = new
        if delta < tol:
            return sweep + 1, delta
    return max_iter, delta


def solve_harmonic(
    image: np.ndarray,
    seeds: np.ndarray,
    sigma_c: float = SIGMA_C,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> np.ndarray:
    """Continuous random-walk solution f in [0, 1] over the seeded graph.

    Seeds stay pinned at their values (backgrounds 0, foregrounds 1);
    neutral pixels start at 0.5 and are swept row-major, each replaced by
    the weighted mean of its 8 neighbors, until the largest change in a
    sweep drops below tol. Edge weights are exp(-|Ii - Ij|^2 / 2 sigma_c^2),
    so a uniform shift of all image colors changes nothing.
    Non-convergence within max_iter is logged and the last iterate kept.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValidationError(f"image must be (H, W, 3) uint8, got {img.shape} {img.dtype}")
    seed_map = np.asarray(seeds)
    if seed_map.shape != img.shape[:2]:
        raise ValidationError(f"seed dims {seed_map.shape} do not match image {img.shape[:2]}")
    if seed_map.dtype != np.uint8 or (seed_map.size and int(seed_map.max()) > NEUTRAL):
        raise ValidationError("seed map must be uint8 with values in {0, 1, 2}")
    if float(sigma_c) <= 0.0:
        raise ValidationError(f"sigma_c must be positive, got {sigma_c}")
    if float(tol) <= 0.0 or int(max_iter) < 1:
        raise ValidationError("tol must be positive and max_iter at least 1")
    if not np.any(seed_map == FG_SEED):
        raise ValidationError("no foreground seeds")
    if not np.any(seed_map == BG_SEED):
        raise ValidationError("no background seeds")

    height, width = seed_map.shape
    f = np.where(seed_map == FG_SEED, 1.0, np.where(seed_map == BG_SEED, 0.0, 0.5))
    f = f.ravel()

    ys, xs = np.nonzero(seed_map == NEUTRAL)  # nonzero scans row-major
    if ys.size == 0:
        return f.reshape(height, width)

    rgb = img.astype(np.float64)
    inv2 = 1.0 / (2.0 * float(sigma_c) ** 2)
    n = ys.size
    nbr_index = np.full((n, 8), -1, dtype=np.int64)
    nbr_weight = np.zeros((n, 8), dtype=np.float64)
    center = rgb[ys, xs]
    for m, (dy, dx) in enumerate(_NEIGHBORS):
        ny = ys + dy
        nx = xs + dx
        ok = (ny >= 0) & (ny < height) & (nx >= 0) & (nx < width)
        diff = rgb[ny[ok], nx[ok]] - center[ok]
        dist_sq = np.einsum("ij,ij->i", diff, diff)
        nbr_index[ok, m] = ny[ok] * width + nx[ok]
        nbr_weight[ok, m] = np.exp(-dist_sq * inv2)

    pixels = (ys * width + xs).astype(np.int64)
    sweeps, residual = _gauss_seidel(f, pixels, nbr_index, nbr_weight, float(tol), int(max_iter))
    if sweeps >= int(max_iter) and residual >= float(tol):
        log.warning(
            "propagation did not converge: residual %.3g after %d sweeps (tol %.3g)",
            residual, sweeps, tol,
        )
    return f.reshape(height, width)


def propagate(
    image: np.ndarray,
    seeds: np.ndarray,
    sigma_c: float = SIGMA_C,
    tol: float = TOL,
    max_iter: int = MAX_ITER,
) -> np.ndarray:
    """Affinity mask: the harmonic solution binarized at 0.5, ties to fg."""
    f = solve_harmonic(image, seeds, sigma_c=sigma_c, tol=tol, max_iter=max_iter)
    return (f >= 0.5).astype(np.uint8)


def load_affinity(path: str | os.PathLike) -> np.ndarray:
    """Read an externally computed affinity mask (binary single-channel PNG).

    This is how real affinity-model outputs enter the pipeline in place
    of the built-in propagation; the file format is exactly the dataset
    module's mask raster restricted to values {0, 1}.
    """
    return load_binary_mask(path)
