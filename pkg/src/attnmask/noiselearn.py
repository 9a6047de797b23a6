"""Label-noise scoring and pruning for candidate masks.

Synthetic masks are noisy labels. Following the confident-learning recipe,
samples are split into k folds per class; a proxy predictor is fit on the
other folds and predicts each held-out sample's mask, and the IoU between
candidate and out-of-fold prediction becomes the sample's quality score q.
The lowest-q fraction of each class is pruned from the training split.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import numpy as np

from .binarize import iou, threshold
from .crf import CrfParams, meanfield_refine, unary_from_prob
from .errors import ValidationError
from .rasters import load_binary_mask
from .seeding import derive_seed

PRUNE_ALPHA = 0.7
DEFAULT_FOLDS = 3

SCORE_FIELDS = ("sample_id", "class_id", "q", "pruned")


@dataclass(eq=False)
class SampleRecord:
    """One candidate sample entering noise scoring."""

    sample_id: str
    class_id: int
    candidate_mask: np.ndarray
    image_ref: str | None = None
    q: float | None = None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.class_id == other.class_id
            and self.image_ref == other.image_ref
            and self.q == other.q
            and np.array_equal(self.candidate_mask, other.candidate_mask)
        )


@dataclass(frozen=True)
class FoldAssignment:
    """Sample-to-fold mapping produced by kfold_split."""

    k: int
    fold_of: Mapping[str, int] = field(default_factory=dict)

    def members(self, fold: int) -> list[str]:
        return sorted(sid for sid, f in self.fold_of.items() if f == fold)


class PredictionProvider(Protocol):
    """Out-of-fold mask predictor used by score_out_of_sample."""

    def fit(self, train: Sequence[SampleRecord]) -> None: ...

    def predict(self, record: SampleRecord) -> np.ndarray: ...


def self_confidence(candidate: np.ndarray, prediction: np.ndarray) -> float:
    """Agreement between a candidate mask and an out-of-fold prediction (IoU)."""
    return iou(candidate, prediction)


def kfold_split(
    ids_by_class: Mapping[int, Sequence[str]],
    k: int = DEFAULT_FOLDS,
    seed: int = 0,
) -> FoldAssignment:
    """Deterministic per-class fold assignment with sizes differing by at most 1.

    Ids are sorted before the seeded shuffle, so the assignment depends
    only on (ids, k, seed) and never on input order.
    """
    if k < 2:
        raise ValidationError(f"need at least 2 folds, got {k}")
    fold_of: dict[str, int] = {}
    for class_id in sorted(ids_by_class):
        ids = sorted(str(s) for s in ids_by_class[class_id])
        if len(set(ids)) != len(ids):
            raise ValidationError(f"class {class_id}: duplicate sample ids")
        if len(ids) < k:
            raise ValidationError(
                f"class {class_id}: {len(ids)} samples cannot fill {k} folds"
            )
        order = np.array(ids, dtype=object)
        rng = np.random.default_rng(derive_seed(seed, "fold", class_id))
        rng.shuffle(order)
        for fold in range(k):
            for sid in order[fold::k]:
                if sid in fold_of:
                    raise ValidationError(f"sample id {sid!r} appears in more than one class")
                fold_of[sid] = fold
    return FoldAssignment(k=k, fold_of=fold_of)


def score_out_of_sample(
    records: Sequence[SampleRecord],
    folds: FoldAssignment,
    predictor: PredictionProvider,
) -> list[SampleRecord]:
    """Fill q = IoU(candidate, out-of-fold prediction) for every record.

    Returns new records in input order; the inputs are left untouched, so
    a predictor failure cannot leave a half-scored batch behind.
    """
    missing = [r.sample_id for r in records if r.sample_id not in folds.fold_of]
    if missing:
        raise ValidationError(f"records missing from fold assignment: {missing[:5]}")
    if len({r.sample_id for r in records}) != len(records):
        raise ValidationError("duplicate sample ids in records")

    by_fold: dict[int, list[SampleRecord]] = {}
    for record in records:
        by_fold.setdefault(folds.fold_of[record.sample_id], []).append(record)

    scores: dict[str, float] = {}
    for fold in sorted(by_fold):
        train = [r for r in records if folds.fold_of[r.sample_id] != fold]
        predictor.fit(train)
        for record in by_fold[fold]:
            predicted = np.asarray(predictor.predict(record))
            if predicted.shape != record.candidate_mask.shape:
                raise ValidationError(
                    f"prediction for {record.sample_id!r} has shape {predicted.shape}, "
                    f"candidate is {record.candidate_mask.shape}"
                )
            scores[record.sample_id] = self_confidence(record.candidate_mask, predicted.astype(np.uint8))
    return [replace(r, q=scores[r.sample_id]) for r in records]


def select_pruned(
    items: Sequence[tuple[str, int, float]],
    alpha: float,
) -> set[str]:
    """Ids of the floor(alpha * n_c) lowest-q items per class.

    Items are (sample_id, class_id, q). Ties on q break by sample_id
    ascending, so reordering the input can never change the selection.
    """
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"prune fraction {alpha} outside [0, 1]")
    by_class: dict[int, list[tuple[str, float]]] = {}
    for sample_id, class_id, q in items:
        by_class.setdefault(class_id, []).append((sample_id, q))

    pruned_ids: set[str] = set()
    for members in by_class.values():
        n_prune = math.floor(alpha * len(members))
        ranked = sorted(members, key=lambda item: (item[1], item[0]))
        pruned_ids.update(sample_id for sample_id, _ in ranked[:n_prune])
    return pruned_ids


def prune_by_class(
    records: Sequence[SampleRecord],
    alpha: float = PRUNE_ALPHA,
) -> tuple[list[SampleRecord], list[SampleRecord]]:
    """Drop the floor(alpha * n_c) lowest-q records of each class.

    Returns (kept, pruned), both in input order; see select_pruned for
    the tie rule.
    """
    unscored = [r.sample_id for r in records if r.q is None]
    if unscored:
        raise ValidationError(f"records have no q score: {unscored[:5]}")
    if len({r.sample_id for r in records}) != len(records):
        raise ValidationError("duplicate sample ids in records")
    pruned_ids = select_pruned([(r.sample_id, r.class_id, r.q) for r in records], alpha)
    kept = [r for r in records if r.sample_id not in pruned_ids]
    pruned = [r for r in records if r.sample_id in pruned_ids]
    return kept, pruned


def write_scores(
    records: Sequence[SampleRecord],
    pruned_ids: set[str],
    path: str | Path,
) -> Path:
    """Write the score table (sample_id, class_id, q, pruned) as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_FIELDS)
        for record in records:
            if record.q is None:
                raise ValidationError(f"record {record.sample_id!r} has no q score")
            writer.writerow(
                [
                    record.sample_id,
                    record.class_id,
                    f"{record.q:.6f}",
                    "true" if record.sample_id in pruned_ids else "false",
                ]
            )
    return path


def read_scores(path: str | Path) -> list[dict]:
    """Read a score CSV back as dicts with typed fields."""
    path = Path(path)
    rows = []
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != list(SCORE_FIELDS):
            raise ValidationError(f"{path}: expected header {','.join(SCORE_FIELDS)}")
        for row in reader:
            try:
                rows.append(
                    {
                        "sample_id": row["sample_id"],
                        "class_id": int(row["class_id"]),
                        "q": float(row["q"]),
                        "pruned": row["pruned"].strip().lower() == "true",
                    }
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"{path}: malformed row {row!r} ({exc})") from exc
    return rows


class DirectoryPredictionProvider:
    """Serves predictions from pre-rendered mask files: {root}/{sample_id}.png."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def fit(self, train: Sequence[SampleRecord]) -> None:
        del train  # purely file-backed

    def predict(self, record: SampleRecord) -> np.ndarray:
        path = self.root / f"{record.sample_id}.png"
        if not path.is_file():
            raise ValidationError(f"no prediction file for {record.sample_id!r} at {path}")
        return load_binary_mask(path)


class RefinementProxyPredictor:
    """Re-derives masks with fold-averaged threshold and perturbed refinement.

    The pipeline has no second model to cross-validate against, so the
    proxy replays its own refinement under different parameters: fit
    computes the mean adaptive threshold over the training fold, and
    predict re-thresholds the held-out sample's aggregated map at that
    foreign threshold, then re-runs the mean-field step. Samples whose
    masks only survive under their own tuned threshold score low.
    """

    def __init__(
        self,
        prob_maps: Mapping[str, np.ndarray],
        images: Mapping[str, np.ndarray],
        gamma_by_id: Mapping[str, float],
        crf_params: CrfParams | None = None,
        epsilon: float = 0.05,
    ):
        self.prob_maps = prob_maps
        self.images = images
        self.gamma_by_id = gamma_by_id
        self.crf_params = crf_params or CrfParams(iterations=2, w_app=10.0, w_smooth=3.0)
        self.epsilon = float(epsilon)
        self._gamma_bar: float | None = None

    def fit(self, train: Sequence[SampleRecord]) -> None:
        gammas = [self.gamma_by_id[r.sample_id] for r in train]
        if not gammas:
            raise ValidationError("cannot fit proxy predictor on an empty fold")
        self._gamma_bar = float(np.mean(gammas))

    def predict(self, record: SampleRecord) -> np.ndarray:
        if self._gamma_bar is None:
            raise ValidationError("predict called before fit")
        prob = self.prob_maps[record.sample_id]
        mask = threshold(prob, self._gamma_bar)
        _, refined = meanfield_refine(
            self.images[record.sample_id],
            unary_from_prob(mask.astype(np.float64), self.epsilon),
            self.crf_params,
        )
        return refined
