"""Synthetic attention bundles with exactly known ground truth.

A fixture plants a random rotated ellipse, renders its indicator at each
attention resolution, smooths it slightly so it looks like attention
instead of a stencil, and stores those fields as the bundle's maps. The
ground-truth mask is defined as the aggregation of the noise-free maps
thresholded at 0.5, so with zero noise the pipeline's own aggregation
reproduces it exactly; with noise, recovery quality measures robustness.
No sampling model is involved, which keeps every test runnable on a bare
CPU box.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from scipy.ndimage import correlate1d

from .aggregate import aggregate
from .augment import Sample, gaussian_kernel
from .binarize import threshold
from .bundle import AttentionBundle, AttentionEntry, write_bundle
from .errors import ValidationError
from .rasters import save_mask
from .seeding import derive_seed

MODEL_ID = "synthetic-fixture"
MIN_SIDE = 32


@dataclass(frozen=True)
class FixtureSpec:
    """Knobs for one fixture family.

    area_range is the sampling range for the planted ellipse's area
    fraction; the guaranteed envelope for the final mask (after smoothing
    and boundary clipping) is the wider `area_bounds`.
    """

    dims: tuple[int, int] = (128, 128)
    resolutions: tuple[int, ...] = (8, 16, 32, 64)
    timesteps: tuple[int, ...] = (1, 11, 21)
    attn_noise: float = 0.0
    image_noise: float = 0.0
    area_range: tuple[float, float] = (0.08, 0.45)
    class_name: str = "blob"
    class_id: int = 1

    def __post_init__(self):
        height, width = self.dims
        if min(height, width) < MIN_SIDE:
            raise ValidationError(f"fixture dims must be at least {MIN_SIDE} px, got {self.dims}")
        if max(height, width) > 2 * min(height, width):
            raise ValidationError("fixture dims aspect ratio must not exceed 2")
        if not self.resolutions or any(r < 4 for r in self.resolutions):
            raise ValidationError("resolutions must be >= 4")
        if any(r > min(height, width) for r in self.resolutions):
            raise ValidationError("resolutions must not exceed the image side")
        if not self.timesteps:
            raise ValidationError("need at least one timestep")
        if len(set(self.timesteps)) != len(self.timesteps):
            raise ValidationError("timesteps must be unique")
        if self.attn_noise < 0.0 or self.image_noise < 0.0:
            raise ValidationError("noise levels must be non-negative")
        lo, hi = self.area_range
        if not 0.0 < lo <= hi < 0.6:
            raise ValidationError(f"area range {self.area_range} not inside (0, 0.6)")
        if not self.class_name or not 1 <= self.class_id <= 254:
            raise ValidationError("need a class name and a class id in [1, 254]")

    @property
    def area_bounds(self) -> tuple[float, float]:
        """Envelope the final mask's fg fraction is guaranteed to stay in."""
        lo, hi = self.area_range
        return 0.25 * lo, min(2.5 * hi, 0.92)

    @property
    def prompt(self) -> str:
        return f"a photo of a {self.class_name}"


def _ellipse_indicator(spec: FixtureSpec, rng: np.random.Generator) -> np.ndarray:
    """Random rotated ellipse indicator, guaranteed fully inside the frame."""
    height, width = spec.dims
    fraction = float(rng.uniform(*spec.area_range))
    aspect = float(rng.uniform(0.6, 1.6))
    angle = float(rng.uniform(0.0, math.pi))
    ax = math.sqrt(fraction * height * width * aspect / math.pi)
    ay = math.sqrt(fraction * height * width / (aspect * math.pi))

    cos_a, sin_a = math.cos(angle), math.sin(angle)
    ext_x = math.hypot(ax * cos_a, ay * sin_a)
    ext_y = math.hypot(ax * sin_a, ay * cos_a)
    # Shrink the ellipse if its bounding box cannot fit with a 1 px margin.
    scale = min(1.0, (width / 2 - 1) / ext_x, (height / 2 - 1) / ext_y)
    ax, ay, ext_x, ext_y = ax * scale, ay * scale, ext_x * scale, ext_y * scale

    cx = float(rng.uniform(ext_x + 0.5, width - 1.5 - ext_x)) if width - 2 > 2 * ext_x else width / 2
    cy = float(rng.uniform(ext_y + 0.5, height - 1.5 - ext_y)) if height - 2 > 2 * ext_y else height / 2

    yy, xx = np.mgrid[0:height, 0:width]
    dx = xx - cx
    dy = yy - cy
    u = (dx * cos_a + dy * sin_a) / ax
    v = (-dx * sin_a + dy * cos_a) / ay
    return (u * u + v * v <= 1.0).astype(np.float64)


def _attention_field(indicator: np.ndarray, resolution: int) -> np.ndarray:
    """Downsample the indicator to one attention grid and soften its edges."""
    low = cv2.resize(indicator.astype(np.float32), (resolution, resolution), interpolation=cv2.INTER_AREA)
    low = low.astype(np.float64)
    sigma = max(0.5, resolution / 16.0)
    taps = gaussian_kernel(2 * math.ceil(3.0 * sigma) + 1, sigma)
    low = correlate1d(low, taps, axis=0, mode="constant")
    low = correlate1d(low, taps, axis=1, mode="constant")
    peak = float(low.max())
    if peak <= 0.0:
        raise ValidationError("planted ellipse vanished during downsampling")
    return low / peak


def gen_fixture(
    spec: FixtureSpec,
    seed: int,
    prompt: str | None = None,
) -> tuple[AttentionBundle, Sample]:
    """Build one (bundle, ground-truth sample) pair, fully seed-determined.

    If `prompt` is given it becomes the bundle prompt; the class token is
    the first whitespace token equal to the class name, appended at the
    end when the text does not mention the class at all.
    """
    rng = np.random.default_rng(derive_seed(seed, "fixture"))
    height, width = spec.dims

    indicator = _ellipse_indicator(spec, rng)
    fields = {r: _attention_field(indicator, r) for r in sorted(set(spec.resolutions))}

    text = prompt if prompt else spec.prompt
    words = text.split()
    if spec.class_name in words:
        class_token = words.index(spec.class_name)
    else:
        words = words + [spec.class_name]
        class_token = len(words) - 1
    tokens = [(i, w) for i, w in enumerate(words)]

    clean_entries = []
    noisy_entries = []
    for resolution in sorted(fields):
        base = fields[resolution].astype(np.float32)
        for t in spec.timesteps:
            clean_entries.append(
                AttentionEntry(layer_id=resolution, timestep=t, token_index=class_token, map=base.copy())
            )
            if spec.attn_noise > 0.0:
                noise = rng.standard_normal(base.shape) * spec.attn_noise
                noisy = np.clip(base.astype(np.float64) + noise, 0.0, None).astype(np.float32)
            else:
                noisy = base.copy()
            noisy_entries.append(
                AttentionEntry(layer_id=resolution, timestep=t, token_index=class_token, map=noisy)
            )

    probe = AttentionBundle(
        image=np.zeros((height, width, 3), dtype=np.uint8),
        prompt=text,
        tokens=tokens,
        entries=clean_entries,
        seed=seed,
        model_id=MODEL_ID,
    )
    clean_map = aggregate(probe, [class_token], (height, width))
    gt = threshold(clean_map, 0.5)

    fg_color, bg_color = _distinct_colors(rng)
    image = np.where(gt[..., None] == 1, fg_color, bg_color).astype(np.float64)
    if spec.image_noise > 0.0:
        image = image + rng.standard_normal(image.shape) * spec.image_noise
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    bundle = AttentionBundle(
        image=image,
        prompt=text,
        tokens=tokens,
        entries=noisy_entries,
        seed=seed,
        model_id=MODEL_ID,
    )
    sample = Sample(image, (gt * spec.class_id).astype(np.uint8))
    return bundle, sample


def _distinct_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two colors far enough apart that color-driven propagation has signal."""
    fg = rng.integers(0, 256, size=3)
    for _ in range(64):
        bg = rng.integers(0, 256, size=3)
        if int(np.abs(fg.astype(int) - bg.astype(int)).max()) >= 96:
            return fg.astype(np.float64), bg.astype(np.float64)
    # Uniform draws land here with probability ~0; fall back to polar colors.
    return np.array([224.0, 224.0, 224.0]), np.array([32.0, 32.0, 32.0])


@dataclass
class FixtureSet:
    """Index of a written fixture directory."""

    root: Path
    bundle_dirs: list[Path] = field(default_factory=list)
    gt_paths: list[Path] = field(default_factory=list)
    class_token: dict[str, int] = field(default_factory=dict)


def write_fixture_set(
    out_dir: str | Path,
    count: int,
    spec: FixtureSpec,
    seed: int,
) -> FixtureSet:
    """Write `count` fixtures: bundle_{i:05d}/ plus gt/{i:05d}.png masks."""
    if count < 1:
        raise ValidationError(f"fixture count must be positive, got {count}")
    out_dir = Path(out_dir)
    fixture_set = FixtureSet(root=out_dir)
    index = []
    for i in range(count):
        bundle, sample = gen_fixture(spec, derive_seed(seed, "sample", i))
        name = f"bundle_{i:05d}"
        bundle_dir = write_bundle(bundle, out_dir / name)
        gt_path = save_mask(sample.mask, out_dir / "gt" / f"{i:05d}.png")
        fixture_set.bundle_dirs.append(bundle_dir)
        fixture_set.gt_paths.append(gt_path)
        index.append(
            {
                "bundle": name,
                "gt": f"gt/{i:05d}.png",
                "class_id": spec.class_id,
                "class_name": spec.class_name,
            }
        )
    text = json.dumps({"count": count, "samples": index}, indent=2, sort_keys=True) + "\n"
    (out_dir / "fixtures.json").write_text(text, encoding="utf-8")
    return fixture_set
