"""Mask-consistent augmentation of (image, mask) pairs.

Every op transforms the image and its label mask through the same
geometry so labels stay pixel-accurate: masks always resample with
nearest-neighbor, and pixels pulled from outside the source frame get the
ignore label. Ops never mutate their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import cv2
import numpy as np
from scipy.ndimage import correlate1d

from .errors import ValidationError
from .rasters import IGNORE_LABEL

DEFAULT_SPLICE_GRIDS = ((1, 2), (2, 1), (2, 2), (3, 3), (5, 5), (8, 8))
BLUR_MIN_LEN = 6
BLUR_MAX_LEN = 22
OCCLUDE_AREA_RANGE = (0.1, 0.4)
MAX_CORNER_JITTER = 0.25

_DEGENERACY_RETRIES = 32


@dataclass(eq=False)
class Sample:
    """An RGB image with its per-pixel label mask."""

    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        img = np.asarray(self.image)
        msk = np.asarray(self.mask)
        if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
            raise ValidationError(f"image must be (H, W, 3) uint8, got {img.shape} {img.dtype}")
        if msk.ndim != 2 or msk.dtype != np.uint8:
            raise ValidationError(f"mask must be (H, W) uint8, got {msk.shape} {msk.dtype}")
        if msk.shape != img.shape[:2]:
            raise ValidationError(f"mask dims {msk.shape} do not match image {img.shape[:2]}")

    @property
    def dims(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def copy(self) -> "Sample":
        return Sample(self.image.copy(), self.mask.copy())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return np.array_equal(self.image, other.image) and np.array_equal(self.mask, other.mask)


@dataclass(frozen=True)
class SpliceGrid:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValidationError(f"grid sides must be positive, got {self.rows}x{self.cols}")

    def __str__(self) -> str:
        return f"{self.rows}x{self.cols}"


def check_grid(grid: SpliceGrid, allowed=DEFAULT_SPLICE_GRIDS) -> SpliceGrid:
    """Reject grids outside the configured set."""
    if (grid.rows, grid.cols) not in allowed:
        raise ValidationError(f"grid {grid} not in allowed set {sorted(allowed)}")
    return grid


def _cell_edges(total: int, parts: int) -> list[int]:
    base = total // parts
    edges = [i * base for i in range(parts)]
    edges.append(total)  # last cell absorbs the remainder
    return edges


def _resize_nearest_centered(mask: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resize on the half-pixel-centered grid.

    cv2's INTER_NEAREST indexes sources as floor(x * scale) with no half
    pixel offset, which puts it up to half a source pixel away from where
    INTER_LINEAR samples. Resizing masks that way drifts them off their
    images at non-integer scales, so masks go through this explicit
    centered gather instead.
    """
    src_h, src_w = mask.shape[:2]
    rows = np.clip(
        np.round((np.arange(height) + 0.5) * (src_h / height) - 0.5).astype(np.intp),
        0,
        src_h - 1,
    )
    cols = np.clip(
        np.round((np.arange(width) + 0.5) * (src_w / width) - 0.5).astype(np.intp),
        0,
        src_w - 1,
    )
    return mask[rows][:, cols]


def splice(
    samples: list[Sample],
    grid: SpliceGrid,
    out_dims: tuple[int, int],
    seed: int,
) -> Sample:
    """Tile a rows x cols grid with seeded draws from `samples`.

    Every cell gets one whole sample resized to fit (linear for the image,
    nearest for the mask). Output dims are exact: the last row/column
    absorbs any division remainder.
    """
    if not samples:
        raise ValidationError("splice needs at least one source sample")
    height, width = int(out_dims[0]), int(out_dims[1])
    if height < grid.rows or width < grid.cols:
        raise ValidationError(f"output {height}x{width} too small for grid {grid}")

    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(samples), size=grid.rows * grid.cols)

    out_image = np.zeros((height, width, 3), dtype=np.uint8)
    out_mask = np.zeros((height, width), dtype=np.uint8)
    row_edges = _cell_edges(height, grid.rows)
    col_edges = _cell_edges(width, grid.cols)
    for r in range(grid.rows):
        for c in range(grid.cols):
            src = samples[int(picks[r * grid.cols + c])]
            y0, y1 = row_edges[r], row_edges[r + 1]
            x0, x1 = col_edges[c], col_edges[c + 1]
            cell = (x1 - x0, y1 - y0)  # cv2 size order: (width, height)
            out_image[y0:y1, x0:x1] = cv2.resize(src.image, cell, interpolation=cv2.INTER_LINEAR)
            out_mask[y0:y1, x0:x1] = _resize_nearest_centered(src.mask, y1 - y0, x1 - x0)
    return Sample(out_image, out_mask)


def gaussian_kernel(length: int, sigma: float | None = None) -> np.ndarray:
    """Normalized 1-d Gaussian taps; default sigma follows the usual
    kernel-size heuristic sigma = 0.3 * ((L - 1) * 0.5 - 1) + 0.8."""
    length = int(length)
    if length < 1:
        raise ValidationError(f"kernel length must be positive, got {length}")
    if length % 2 == 0:
        length += 1
    if sigma is None:
        sigma = 0.3 * ((length - 1) * 0.5 - 1.0) + 0.8
    sigma = float(sigma)
    if sigma <= 0.0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    center = (length - 1) / 2.0
    taps = np.exp(-((np.arange(length) - center) ** 2) / (2.0 * sigma**2))
    return taps / taps.sum()


def gaussian_blur(
    image: np.ndarray,
    kernel_len: int,
    sigma: float | None = None,
) -> np.ndarray:
    """Separable Gaussian blur with reflected borders.

    kernel_len must fall in [6, 22]; even lengths round up to the next odd
    so the kernel stays centered. uint8 input comes back as uint8
    (rounded); float input stays float64, which keeps the op testable
    without quantization in the way.
    """
    if not BLUR_MIN_LEN <= int(kernel_len) <= BLUR_MAX_LEN:
        raise ValidationError(
            f"kernel length {kernel_len} outside [{BLUR_MIN_LEN}, {BLUR_MAX_LEN}]"
        )
    arr = np.asarray(image)
    if arr.ndim not in (2, 3):
        raise ValidationError(f"image must be 2- or 3-dimensional, got shape {arr.shape}")
    taps = gaussian_kernel(int(kernel_len), sigma)
    work = arr.astype(np.float64)
    work = correlate1d(work, taps, axis=0, mode="reflect")
    work = correlate1d(work, taps, axis=1, mode="reflect")
    if arr.dtype == np.uint8:
        return np.clip(np.rint(work), 0, 255).astype(np.uint8)
    return work


def occlude(
    target: Sample,
    source: Sample,
    area_range: tuple[float, float] = OCCLUDE_AREA_RANGE,
    seed: int = 0,
) -> Sample:
    """Paste one rectangle of `source` (image and mask) into `target`.

    The rectangle area fraction is drawn uniformly from area_range; its
    sides scale with sqrt of that fraction, and its position is drawn so
    it always lies fully inside the frame.
    """
    if target.dims != source.dims:
        raise ValidationError(f"sample dims differ: {target.dims} vs {source.dims}")
    lo, hi = float(area_range[0]), float(area_range[1])
    if not 0.0 < lo <= hi < 1.0:
        raise ValidationError(f"area range {area_range} not inside (0, 1)")

    height, width = target.dims
    rng = np.random.default_rng(seed)
    fraction = float(rng.uniform(lo, hi))
    side = math.sqrt(fraction)
    rect_h = min(height, int(round(height * side)))
    rect_w = min(width, int(round(width * side)))
    out = target.copy()
    if rect_h == 0 or rect_w == 0:
        return out
    top = int(rng.integers(0, height - rect_h + 1))
    left = int(rng.integers(0, width - rect_w + 1))
    out.image[top : top + rect_h, left : left + rect_w] = source.image[
        top : top + rect_h, left : left + rect_w
    ]
    out.mask[top : top + rect_h, left : left + rect_w] = source.mask[
        top : top + rect_h, left : left + rect_w
    ]
    return out


def homography_from_corners(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 projective transform mapping 4 source corners onto 4 targets.

    Solves the standard 8-equation linear system in float64 with h33 = 1.
    (The cv2 helper takes float32 points; quadrant-of-a-pixel quantization
    there is enough to matter when transforms are chained, so the solve
    stays in numpy and cv2 only does the warping.)
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != (4, 2) or dst.shape != (4, 2):
        raise ValidationError("need exactly 4 source and 4 target points")
    a = np.zeros((8, 8), dtype=np.float64)
    b = np.zeros(8, dtype=np.float64)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise ValidationError(f"degenerate corner correspondence ({exc})") from exc
    return np.append(h, 1.0).reshape(3, 3)


def _has_collinear_triple(points: np.ndarray, rel_tol: float = 1e-9) -> bool:
    points = np.asarray(points, dtype=np.float64)
    scale = max(float(np.abs(points).max()), 1.0)
    for skip in range(4):
        p = np.delete(points, skip, axis=0)
        area2 = abs(
            (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1])
            - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        )
        if area2 < rel_tol * scale * scale:
            return True
    return False


def perspective(
    sample: Sample,
    max_jitter: float = MAX_CORNER_JITTER,
    seed: int = 0,
) -> Sample:
    """Warp image and mask through one random projective transform.

    Each corner moves by up to max_jitter of the frame side. Image pixels
    interpolate linearly and fill with black outside the frame; mask
    pixels use nearest-neighbor and fill with the ignore label, so labels
    never bleed across the warp. A corner draw with three collinear
    points would make the transform singular and is redrawn.
    """
    max_jitter = float(max_jitter)
    if not 0.0 <= max_jitter <= MAX_CORNER_JITTER:
        raise ValidationError(f"corner jitter {max_jitter} outside [0, {MAX_CORNER_JITTER}]")
    out = sample.copy()
    if max_jitter == 0.0:
        return out

    height, width = sample.dims
    src = np.array(
        [[0.0, 0.0], [width - 1.0, 0.0], [width - 1.0, height - 1.0], [0.0, height - 1.0]]
    )
    rng = np.random.default_rng(seed)
    for _ in range(_DEGENERACY_RETRIES):
        jitter = rng.uniform(-max_jitter, max_jitter, size=(4, 2))
        dst = src + jitter * np.array([width, height])
        if not _has_collinear_triple(dst):
            break
    else:
        raise ValidationError("could not draw non-degenerate corners")

    matrix = homography_from_corners(src, dst)
    warped_image = cv2.warpPerspective(
        out.image,
        matrix,
        (width, height),
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=(0, 0, 0),
    )
    warped_mask = cv2.warpPerspective(
        out.mask,
        matrix,
        (width, height),
        flags=cv2.INTER_NEAREST,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=IGNORE_LABEL,
    )
    return Sample(warped_image, warped_mask)
