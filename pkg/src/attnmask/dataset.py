"""Dataset emission and evaluation.

Emitted datasets follow the common segmentation layout: images/ holds RGB
PNGs, masks/ holds single-channel class-id PNGs, manifest.json records
per-sample provenance, and train.txt lists the ids that survived pruning
(augmented samples included). Everything is written deterministically so
two runs with the same seed produce byte-identical trees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .rasters import IGNORE_LABEL, save_image, save_mask

MANIFEST_VERSION = 1

_CONNECT_8 = np.ones((3, 3), dtype=np.uint8)


def clean_mask(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Zero out 8-connected foreground components smaller than min_area."""
    arr = np.asarray(mask)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValidationError(f"mask must be (H, W) uint8, got {arr.shape} {arr.dtype}")
    if arr.size and int(arr.max()) > 1:
        raise ValidationError("clean_mask expects a binary mask")
    if min_area < 0:
        raise ValidationError(f"min_area must be non-negative, got {min_area}")
    if min_area == 0:
        return arr.copy()
    labels, count = ndimage.label(arr, structure=_CONNECT_8)
    if count == 0:
        return arr.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels].astype(np.uint8)


@dataclass(frozen=True)
class ManifestSample:
    """Provenance row for one emitted sample."""

    sample_id: str
    image_path: str
    mask_path: str
    class_id: int
    prompt: str
    seed: int
    gamma_hat: float | None
    q: float | None
    pruned: bool
    augment_trace: str | None

    def to_json(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "class_id": self.class_id,
            "prompt": self.prompt,
            "seed": self.seed,
            "gamma_hat": self.gamma_hat,
            "q": self.q,
            "pruned": self.pruned,
            "augment_trace": self.augment_trace,
        }


@dataclass
class DatasetManifest:
    format_version: int = MANIFEST_VERSION
    samples: list[ManifestSample] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "samples": [s.to_json() for s in self.samples],
        }

    @classmethod
    def from_json(cls, data: dict) -> "DatasetManifest":
        try:
            samples = [ManifestSample(**row) for row in data["samples"]]
            return cls(format_version=int(data["format_version"]), samples=samples)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed dataset manifest ({exc})") from exc


@dataclass(eq=False)
class EmitRecord:
    """One sample headed for disk: pixels plus manifest metadata."""

    sample_id: str
    image: np.ndarray
    mask: np.ndarray
    class_id: int
    prompt: str
    seed: int
    gamma_hat: float | None = None
    q: float | None = None
    pruned: bool = False
    augment_trace: str | None = None


def emit(
    records: Sequence[EmitRecord],
    out_dir: str | Path,
    palette: bool = False,
) -> DatasetManifest:
    """Write the dataset tree; returns the manifest it wrote.

    Pruned samples are still emitted with their pruned flag set (they cost
    nothing and keep the record auditable) but stay out of train.txt.
    """
    if not records:
        raise ValidationError("nothing to emit")
    ids = [r.sample_id for r in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise ValidationError(f"duplicate sample ids: {dupes[:5]}")

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest()
    train_ids = []
    for record in sorted(records, key=lambda r: r.sample_id):
        image_rel = f"images/{record.sample_id}.png"
        mask_rel = f"masks/{record.sample_id}.png"
        save_image(record.image, out_dir / image_rel)
        save_mask(record.mask, out_dir / mask_rel, palette=palette)
        manifest.samples.append(
            ManifestSample(
                sample_id=record.sample_id,
                image_path=image_rel,
                mask_path=mask_rel,
                class_id=record.class_id,
                prompt=record.prompt,
                seed=record.seed,
                gamma_hat=record.gamma_hat,
                q=record.q,
                pruned=record.pruned,
                augment_trace=record.augment_trace,
            )
        )
        if not record.pruned:
            train_ids.append(record.sample_id)

    text = json.dumps(manifest.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    (out_dir / "manifest.json").write_text(text, encoding="utf-8")
    (out_dir / "train.txt").write_text("".join(f"{i}\n" for i in train_ids), encoding="utf-8")
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    manifest_file = path / "manifest.json" if path.is_dir() else path
    if not manifest_file.is_file():
        raise ValidationError(f"{manifest_file}: no dataset manifest")
    try:
        data = json.loads(manifest_file.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{manifest_file}: invalid JSON ({exc})") from exc
    return DatasetManifest.from_json(data)


@dataclass(frozen=True)
class EvalReport:
    """Per-class and mean IoU over a prediction set."""

    per_class_iou: Mapping[int, float]
    miou: float
    pixel_counts: Mapping[int, tuple[int, int, int]]  # class -> (tp, fp, fn)

    def to_json(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": {str(c): v for c, v in sorted(self.per_class_iou.items())},
            "pixel_counts": {
                str(c): list(v) for c, v in sorted(self.pixel_counts.items())
            },
        }


def evaluate_miou(
    predictions: Mapping[str, np.ndarray],
    ground_truth: Mapping[str, np.ndarray],
    class_ids: Sequence[int],
) -> EvalReport:
    """Mean IoU over classes, accumulated over all samples.

    Ignore-labeled ground-truth pixels (255) never count for or against
    any class. Classes absent from both prediction and ground truth
    (zero denominator) are left out of the mean rather than counted as 0
    or 1. The mean is unweighted across the classes that remain.
    """
    classes = sorted(set(int(c) for c in class_ids))
    if not classes:
        raise ValidationError("class list is empty")
    if IGNORE_LABEL in classes:
        raise ValidationError(f"class list must not contain the ignore label {IGNORE_LABEL}")
    if not ground_truth:
        raise ValidationError("no ground-truth masks")

    tp = {c: 0 for c in classes}
    fp = {c: 0 for c in classes}
    fn = {c: 0 for c in classes}
    for sample_id in sorted(ground_truth):
        if sample_id not in predictions:
            raise ValidationError(f"missing prediction for sample {sample_id!r}")
        gt = np.asarray(ground_truth[sample_id])
        pred = np.asarray(predictions[sample_id])
        if gt.shape != pred.shape:
            raise ValidationError(
                f"sample {sample_id!r}: prediction {pred.shape} does not match ground truth {gt.shape}"
            )
        valid = gt != IGNORE_LABEL
        for c in classes:
            pred_c = (pred == c) & valid
            gt_c = gt == c  # ignore pixels are never == c, IGNORE_LABEL is excluded above
            tp[c] += int(np.count_nonzero(pred_c & gt_c))
            fp[c] += int(np.count_nonzero(pred_c & ~gt_c))
            fn[c] += int(np.count_nonzero(~pred_c & gt_c & valid))

    per_class = {}
    for c in classes:
        denom = tp[c] + fp[c] + fn[c]
        if denom > 0:
            per_class[c] = tp[c] / denom
    if not per_class:
        raise ValidationError("no class had any pixels to evaluate")
    miou = float(np.mean(list(per_class.values())))
    counts = {c: (tp[c], fp[c], fn[c]) for c in classes}
    return EvalReport(per_class_iou=per_class, miou=miou, pixel_counts=counts)
