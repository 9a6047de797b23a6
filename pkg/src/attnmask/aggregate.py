"""Aggregation of raw cross-attention maps into one per-pixel map.

For a token group, every stored map is max-normalized, upsampled to the
target grid with corner-aligned bilinear interpolation, and averaged:
first over (layer, timestep) within each token, then across tokens. The
result is renormalized so its maximum is exactly 1.0, which keeps the
downstream threshold search on a fixed scale regardless of how diffuse
the attention was.
"""

from __future__ import annotations

import numpy as np

from .bundle import AttentionBundle, AttentionEntry
from .errors import DegenerateMapError, ValidationError

REDUCERS = ("mean", "max")


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Scale a non-negative 2-d map so its max is exactly 1.0 (float64)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"map must be 2-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DegenerateMapError("map holds NaN or inf")
    if arr.size == 0:
        raise ValidationError("map is empty")
    if float(arr.min()) < 0.0:
        raise ValidationError("map holds negative values")
    peak = float(arr.max())
    if peak <= 0.0:
        raise DegenerateMapError("map is all-zero, cannot normalize")
    return arr / peak


def upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear upsample to (height, width).

    Source corners map exactly onto target corners and every output value
    is a convex combination of inputs, so the range can never grow. Both
    target sides must be at least the source sides; this function never
    downsamples.
    """
    src = np.asarray(values, dtype=np.float64)
    if src.ndim != 2:
        raise ValidationError(f"map must be 2-dimensional, got shape {src.shape}")
    h, w = src.shape
    if h < 1 or w < 1:
        raise ValidationError("map is empty")
    if height < h or width < w:
        raise ValidationError(
            f"cannot downsample: source {h}x{w}, target {height}x{width}"
        )
    if (height, width) == (h, w):
        return src.copy()

    # linspace(0, n-1, m) is the corner-aligned source coordinate grid:
    # position i maps to i * (n - 1) / (m - 1), with degenerate axes pinned at 0.
    rows = np.linspace(0.0, h - 1, height) if h > 1 else np.zeros(height)
    cols = np.linspace(0.0, w - 1, width) if w > 1 else np.zeros(width)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = (rows - r0)[:, None]
    fc = cols - c0

    top = src[r0][:, c0] * (1.0 - fc) + src[r0][:, c1] * fc
    bottom = src[r1][:, c0] * (1.0 - fc) + src[r1][:, c1] * fc
    return top * (1.0 - fr) + bottom * fr


def aggregate(
    bundle: AttentionBundle,
    token_group: list[int],
    target: tuple[int, int],
    reducer: str = "mean",
    normalize_after_upsample: bool = False,
) -> np.ndarray:
    """Fuse all stored maps for token_group into one (H, W) map, max 1.0.

    normalize_after_upsample flips the order of the per-map normalize and
    upsample steps. The default normalizes at native resolution; flipping
    only matters when a map's peak does not survive interpolation onto the
    target grid, which slightly re-weights that map.
    """
    if not token_group:
        raise ValidationError("token group is empty")
    if reducer not in REDUCERS:
        raise ValidationError(f"unknown reducer {reducer!r}, expected one of {REDUCERS}")
    height, width = int(target[0]), int(target[1])
    if height < 1 or width < 1:
        raise ValidationError(f"bad target dims {target}")

    by_token: dict[int, list[AttentionEntry]] = {t: [] for t in token_group}
    if len(by_token) != len(token_group):
        raise ValidationError("token group holds duplicate indices")
    for entry in bundle.entries:
        if entry.token_index in by_token:
            by_token[entry.token_index].append(entry)

    per_token = []
    for token in token_group:
        entries = sorted(by_token[token], key=AttentionEntry.key)
        if not entries:
            raise ValidationError(f"bundle has no attention entries for token {token}")
        acc = np.zeros((height, width), dtype=np.float64)
        for entry in entries:
            if normalize_after_upsample:
                acc += normalize_map(upsample(np.asarray(entry.map, dtype=np.float64), height, width))
            else:
                acc += upsample(normalize_map(entry.map), height, width)
        per_token.append(acc / len(entries))

    stack = np.stack(per_token)
    combined = stack.mean(axis=0) if reducer == "mean" else stack.max(axis=0)
    return normalize_map(combined)


def find_token_group(bundle: AttentionBundle, word: str) -> list[int]:
    """Token indices whose text spells out `word`.

    Exact single-token matches win; otherwise consecutive token runs whose
    concatenated text equals the word are accepted, which covers exporters
    that split rare words into sub-word pieces.
    """
    if not word:
        raise ValidationError("empty token text")
    tokens = list(bundle.tokens)
    exact = [i for i, text in tokens if text == word]
    if exact:
        return exact
    for start in range(len(tokens)):
        combined = ""
        for stop in range(start, len(tokens)):
            combined += tokens[stop][1]
            if combined == word:
                return [tokens[k][0] for k in range(start, stop + 1)]
            if len(combined) >= len(word):
                break
    raise ValidationError(f"prompt tokens do not spell out {word!r}")
