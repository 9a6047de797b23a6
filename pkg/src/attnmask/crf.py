"""Fully connected binary CRF, solved by parallel mean-field iteration.

Pairwise potentials follow the usual appearance + smoothness mixture:

    k(i, j) = w_app * exp(-|pi - pj|^2 / (2 ta^2) - |Ii - Ij|^2 / (2 tb^2))
            + w_smooth * exp(-|pi - pj|^2 / (2 tg^2))

with a Potts label compatibility (unit penalty for differing labels).
Updates are synchronous: every pixel's message is computed from the
previous iteration's marginals, then all marginals are renormalized at
once. Small grids are solved exactly over all pixel pairs; larger grids
truncate the pairwise sum to a window of radius 3 * max(ta, tg), beyond
which the spatial kernels are numerically negligible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# Above this pixel count the full quadratic pairwise sum stops being exact
# and switches to the truncated window.
EXACT_PIXEL_LIMIT = 96 * 96

# Cached per-offset kernels are dropped beyond this many float64 values
# (~512 MB) and recomputed per iteration instead.
_CACHE_VALUE_LIMIT = 64_000_000


@dataclass(frozen=True)
class CrfParams:
    """Mean-field solver parameters; defaults suit photographic images."""

    w_app: float = 10.0
    theta_alpha: float = 80.0
    theta_beta: float = 13.0
    w_smooth: float = 3.0
    theta_gamma: float = 3.0
    iterations: int = 5
    epsilon: float = 0.05

    def validate(self) -> None:
        if self.w_app < 0.0 or self.w_smooth < 0.0:
            raise ValidationError("kernel weights must be non-negative")
        if min(self.theta_alpha, self.theta_beta, self.theta_gamma) <= 0.0:
            raise ValidationError("kernel bandwidths must be positive")
        if self.iterations < 0:
            raise ValidationError("iteration count must be non-negative")
        if not 0.0 < self.epsilon < 0.5:
            raise ValidationError(f"epsilon {self.epsilon} outside (0, 0.5)")


def unary_from_prob(prob: np.ndarray, epsilon: float = 0.05) -> np.ndarray:
    """Negative-log unary costs (H, W, 2) from a foreground probability map.

    Probabilities are clamped to [epsilon, 1 - epsilon] first, so hard 0/1
    inputs (binary masks) yield finite costs and the solver can still flip
    pixels the pairwise terms disagree with. Channel 0 is background.
    """
    arr = np.asarray(prob, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"probability map must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("probability map holds NaN or inf")
    if arr.size and (float(arr.min()) < 0.0 or float(arr.max()) > 1.0):
        raise ValidationError("probability map values outside [0, 1]")
    if not 0.0 < float(epsilon) < 0.5:
        raise ValidationError(f"epsilon {epsilon} outside (0, 0.5)")
    p = np.clip(arr, epsilon, 1.0 - epsilon)
    unary = np.empty(arr.shape + (2,), dtype=np.float64)
    unary[..., 0] = -np.log(1.0 - p)
    unary[..., 1] = -np.log(p)
    return unary


def _check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"image must be (H, W, 3), got shape {img.shape}")
    if img.dtype != np.uint8:
        raise ValidationError(f"image must be uint8, got {img.dtype}")
    return img


def _softmax_from_costs(costs: np.ndarray) -> np.ndarray:
    z = -costs
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _offsets(height: int, width: int, radius: int) -> list[tuple[int, int]]:
    ry = min(radius, height - 1)
    rx = min(radius, width - 1)
    return [
        (dy, dx)
        for dy in range(-ry, ry + 1)
        for dx in range(-rx, rx + 1)
        if (dy, dx) != (0, 0)
    ]


def _offset_slices(dy: int, dx: int, height: int, width: int):
    ty = slice(max(0, -dy), height - max(0, dy))
    tx = slice(max(0, -dx), width - max(0, dx))
    sy = slice(max(0, dy), height + min(0, dy))
    sx = slice(max(0, dx), width + min(0, dx))
    return (ty, tx), (sy, sx)


def meanfield_refine(
    image: np.ndarray,
    unary: np.ndarray,
    params: CrfParams | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Run mean-field updates; return (foreground posterior, binary mask).

    The mask takes the higher-probability label per pixel, foreground on
    ties. With zero iterations the posterior is exactly softmax(-unary).
    """
    params = params or CrfParams()
    params.validate()
    img = _check_image(image)
    u = np.asarray(unary, dtype=np.float64)
    if u.ndim != 3 or u.shape[2] != 2:
        raise ValidationError(f"unary must be (H, W, 2), got shape {u.shape}")
    if u.shape[:2] != img.shape[:2]:
        raise ValidationError(f"unary dims {u.shape[:2]} do not match image {img.shape[:2]}")
    if not np.all(np.isfinite(u)):
        raise ValidationError("unary costs hold NaN or inf")

    height, width = img.shape[:2]
    q = _softmax_from_costs(u)
    if params.iterations == 0:
        return q[..., 1].copy(), _posterior_mask(q)

    if height * width <= EXACT_PIXEL_LIMIT:
        radius = max(height, width)  # window covers every pixel pair: exact
    else:
        radius = math.ceil(3.0 * max(params.theta_alpha, params.theta_gamma))
    offsets = _offsets(height, width, radius)

    rgb = img.astype(np.float64)
    inv2_beta = 1.0 / (2.0 * params.theta_beta**2)
    inv2_alpha = 1.0 / (2.0 * params.theta_alpha**2)
    inv2_gamma = 1.0 / (2.0 * params.theta_gamma**2)

    cache: list[np.ndarray] | None = []
    cache_budget = _CACHE_VALUE_LIMIT

    def kernel_for(dy: int, dx: int, tgt, src) -> np.ndarray:
        spatial_sq = float(dy * dy + dx * dx)
        diff = rgb[tgt] - rgb[src]
        color_sq = np.einsum("...c,...c->...", diff, diff)
        app = math.exp(-spatial_sq * inv2_alpha) * np.exp(-color_sq * inv2_beta)
        smooth = math.exp(-spatial_sq * inv2_gamma)
        return params.w_app * app + params.w_smooth * smooth

    slice_pairs = [_offset_slices(dy, dx, height, width) for dy, dx in offsets]
    for it in range(params.iterations):
        message = np.zeros((height, width, 2), dtype=np.float64)
        for k, (dy, dx) in enumerate(offsets):
            tgt, src = slice_pairs[k]
            if cache is not None and it > 0:
                w = cache[k]
            else:
                w = kernel_for(dy, dx, tgt, src)
                if cache is not None and it == 0:
                    cache_budget -= w.size
                    if cache_budget < 0:
                        cache = None
                    else:
                        cache.append(w)
            message[tgt[0], tgt[1], 0] += w * q[src[0], src[1], 0]
            message[tgt[0], tgt[1], 1] += w * q[src[0], src[1], 1]
        # Potts compatibility: label l pays for neighbors of the other label.
        psi = np.empty_like(u)
        psi[..., 0] = u[..., 0] + message[..., 1]
        psi[..., 1] = u[..., 1] + message[..., 0]
        q = _softmax_from_costs(psi)

    posterior = q[..., 1].copy()
    return posterior, _posterior_mask(q)


def _posterior_mask(q: np.ndarray) -> np.ndarray:
    return (q[..., 1] >= q[..., 0]).astype(np.uint8)
