"""Threshold search: turn an aggregated attention map into a binary mask.

A fixed threshold fails across prompts because attention sharpness varies
with the scene, so the threshold is chosen per image: scan a grid of
candidate values and keep the one whose mask best agrees (by IoU) with an
affinity mask obtained from an independent, image-driven propagation.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError

OMEGA_START = 0.05
OMEGA_STOP = 0.95
OMEGA_STEP = 0.01


def default_search_space() -> np.ndarray:
    """Candidate thresholds 0.05, 0.06, ..., 0.95."""
    return np.arange(5, 96, dtype=np.float64) / 100.0


def _as_binary(mask: np.ndarray, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        raise ValidationError(f"{name} must be uint8, got {arr.dtype}")
    if arr.size and int(arr.max()) > 1:
        raise ValidationError(f"{name} holds values outside {{0, 1}}")
    return arr


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; two empty masks give 1.0."""
    a = _as_binary(a, "mask a")
    b = _as_binary(b, "mask b")
    if a.shape != b.shape:
        raise ValidationError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.count_nonzero(np.logical_and(a, b)))
    union = int(np.count_nonzero(np.logical_or(a, b)))
    if union == 0:
        return 1.0
    return inter / union


def threshold(values: np.ndarray, gamma: float) -> np.ndarray:
    """Binary mask of pixels with value >= gamma (gamma strictly inside (0, 1))."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"map must be 2-dimensional, got shape {arr.shape}")
    gamma = float(gamma)
    if not 0.0 < gamma < 1.0:
        raise ValidationError(f"threshold {gamma} outside open interval (0, 1)")
    return (arr >= gamma).astype(np.uint8)


def _check_search_space(omega: np.ndarray) -> np.ndarray:
    arr = np.asarray(omega, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError("search space must be a non-empty 1-d array")
    if np.any(arr <= 0.0) or np.any(arr >= 1.0):
        raise ValidationError("search space values must lie strictly inside (0, 1)")
    if np.any(np.diff(arr) <= 0.0):
        raise ValidationError("search space must be strictly increasing")
    return arr


def adaptive_threshold(
    values: np.ndarray,
    affinity: np.ndarray,
    omega: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Pick the threshold whose mask maximizes IoU against the affinity mask.

    Ties resolve to the smallest candidate. Returns (gamma_hat, mask).

    The scan is O(N log N + |omega| log N): with the map values sorted
    once, |{v >= gamma}| and |{v >= gamma, affinity=1}| come from binary
    search, giving exactly the same counts as thresholding outright.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"map must be 2-dimensional, got shape {arr.shape}")
    aff = _as_binary(affinity, "affinity mask")
    if aff.shape != arr.shape:
        raise ValidationError(f"affinity shape {aff.shape} does not match map {arr.shape}")
    omega = default_search_space() if omega is None else _check_search_space(omega)

    flat = arr.ravel()
    sorted_all = np.sort(flat)
    sorted_fg = np.sort(flat[aff.ravel() == 1])
    n_all = sorted_all.size
    n_fg = sorted_fg.size

    mask_sizes = n_all - np.searchsorted(sorted_all, omega, side="left")
    inters = n_fg - np.searchsorted(sorted_fg, omega, side="left")
    unions = n_fg + mask_sizes - inters
    scores = np.where(unions == 0, 1.0, inters / np.where(unions == 0, 1, unions))

    best = int(np.argmax(scores))  # argmax returns the first maximum: smallest gamma
    gamma_hat = float(omega[best])
    return gamma_hat, threshold(arr, gamma_hat)
