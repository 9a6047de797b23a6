"""Command line interface.

One subcommand per pipeline stage plus `pipeline` for the whole run and
`fixture` for generating the synthetic test substrate. Exit codes: 0 on
success, 2 when inputs or parameters fail validation, 1 on runtime
failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import affinity as affinity_mod
from . import rasters
from .aggregate import aggregate, find_token_group
from .augment import Sample, SpliceGrid, gaussian_blur, occlude, perspective, splice
from .binarize import adaptive_threshold, threshold
from .bundle import read_bundle
from .config import PipelineConfig, load_config
from .crf import meanfield_refine, unary_from_prob
from .dataset import EmitRecord, emit, evaluate_miou, load_manifest
from .errors import ValidationError
from .fixtures import write_fixture_set
from .noiselearn import (
    DirectoryPredictionProvider,
    SampleRecord,
    kfold_split,
    read_scores,
    score_out_of_sample,
    select_pruned,
    write_scores,
)
from .pipeline import run_pipeline
from .seeding import derive_seed

log = logging.getLogger(__name__)


def _load_map(path: Path) -> np.ndarray:
    if not path.is_file():
        raise ValidationError(f"no such map file: {path}")
    if path.suffix == ".npy":
        arr = np.load(path)
    else:
        arr = rasters.load_mask(path).astype(np.float64) / 255.0
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 2:
        raise ValidationError(f"{path}: expected a single-channel map, got shape {arr.shape}")
    return arr


def _save_map(arr: np.ndarray, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.asarray(arr, dtype=np.float64))


def _config_for(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if overrides:
        config = replace(config, **overrides)
    return config


def cmd_aggregate(args: argparse.Namespace) -> int:
    config = _config_for(args)
    bundle = read_bundle(Path(args.bundle))
    if args.token_indices:
        token_group = [int(t) for t in args.token_indices.split(",")]
    elif args.token_text:
        token_group = find_token_group(bundle, args.token_text)
    else:
        raise ValidationError("need --token-text or --token-indices")
    target = tuple(args.target) if args.target else bundle.image.shape[:2]
    result = aggregate(
        bundle,
        token_group,
        (int(target[0]), int(target[1])),
        reducer=config.reducer,
        normalize_after_upsample=config.normalize_after_upsample,
    )
    _save_map(result, Path(args.out))
    print(json.dumps({"out": str(args.out), "tokens": token_group, "max": float(result.max())}))
    return 0


def cmd_binarize(args: argparse.Namespace) -> int:
    config = _config_for(args)
    prob = _load_map(Path(args.map))
    if args.affinity:
        aff = rasters.load_binary_mask(Path(args.affinity))
        gamma, mask = adaptive_threshold(prob, aff, config.thresholds.search_space())
    elif args.gamma is not None:
        gamma = float(args.gamma)
        mask = threshold(prob, gamma)
    else:
        raise ValidationError("need --gamma or --affinity")
    rasters.save_mask(mask, Path(args.out))
    print(json.dumps({"gamma": gamma, "fg_pixels": int(mask.sum()), "out": str(args.out)}))
    return 0


def cmd_refine(args: argparse.Namespace) -> int:
    config = _config_for(args)
    image = rasters.load_image(Path(args.image))
    prob = _load_map(Path(args.map))
    posterior, mask = meanfield_refine(
        image, unary_from_prob(prob, config.crf.epsilon), config.crf
    )
    rasters.save_mask(mask, Path(args.out))
    if args.posterior:
        _save_map(posterior, Path(args.posterior))
    print(json.dumps({"fg_pixels": int(mask.sum()), "out": str(args.out)}))
    return 0


def cmd_affinity(args: argparse.Namespace) -> int:
    config = _config_for(args)
    image = rasters.load_image(Path(args.image))
    prob = _load_map(Path(args.map))
    cfg = config.affinity
    seeds = affinity_mod.extract_seeds(prob, cfg.theta_hi, cfg.theta_lo)
    mask = affinity_mod.propagate(
        image, seeds, sigma_c=cfg.sigma_c, tol=cfg.tol, max_iter=cfg.max_iter
    )
    rasters.save_mask(mask, Path(args.out))
    print(json.dumps({"fg_pixels": int(mask.sum()), "out": str(args.out)}))
    return 0


def _read_record_table(path: Path) -> list[SampleRecord]:
    if not path.is_file():
        raise ValidationError(f"no such record table: {path}")
    records = []
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"sample_id", "class_id", "mask_path"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise ValidationError(f"{path}: need columns {sorted(required)}")
        for row in reader:
            mask_path = Path(row["mask_path"])
            if not mask_path.is_absolute():
                mask_path = path.parent / mask_path
            records.append(
                SampleRecord(
                    sample_id=row["sample_id"],
                    class_id=int(row["class_id"]),
                    candidate_mask=rasters.load_binary_mask(mask_path),
                    image_ref=str(mask_path),
                )
            )
    if not records:
        raise ValidationError(f"{path}: no records")
    return records


def cmd_score(args: argparse.Namespace) -> int:
    config = _config_for(args)
    records = _read_record_table(Path(args.records))
    ids_by_class: dict[int, list[str]] = {}
    for record in records:
        ids_by_class.setdefault(record.class_id, []).append(record.sample_id)
    folds = kfold_split(ids_by_class, k=config.noise.folds, seed=config.seed)
    provider = DirectoryPredictionProvider(Path(args.predictions))
    scored = score_out_of_sample(records, folds, provider)
    write_scores(scored, set(), Path(args.out))
    print(json.dumps({"scored": len(scored), "out": str(args.out)}))
    return 0


def cmd_prune(args: argparse.Namespace) -> int:
    rows = read_scores(Path(args.scores))
    pruned_ids = select_pruned([(r["sample_id"], r["class_id"], r["q"]) for r in rows], args.alpha)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "class_id", "q", "pruned"])
        for row in rows:
            writer.writerow(
                [
                    row["sample_id"],
                    row["class_id"],
                    f"{row['q']:.6f}",
                    "true" if row["sample_id"] in pruned_ids else "false",
                ]
            )
    print(json.dumps({"pruned": len(pruned_ids), "total": len(rows), "out": str(out)}))
    return 0


def cmd_augment(args: argparse.Namespace) -> int:
    config = _config_for(args)
    manifest = load_manifest(Path(args.dataset))
    root = Path(args.dataset)
    pool = []
    meta = []
    for row in manifest.samples:
        if row.pruned or row.augment_trace:
            continue
        pool.append(
            Sample(rasters.load_image(root / row.image_path), rasters.load_mask(root / row.mask_path))
        )
        meta.append(row)
    if not pool:
        raise ValidationError(f"{root}: no unpruned original samples to augment")

    cfg = config.augment
    count = args.count if args.count is not None else cfg.count
    grids = tuple(SpliceGrid(r, c) for r, c in cfg.grids)
    records = []
    for j in range(count):
        seed_j = derive_seed(config.seed, "augment", j)
        rng = np.random.default_rng(seed_j)
        op = cfg.ops[int(rng.integers(0, len(cfg.ops)))]
        base_idx = int(rng.integers(0, len(pool)))
        base = pool[base_idx]
        if op == "splice":
            grid = grids[int(rng.integers(0, len(grids)))]
            out_sample = splice(pool, grid, base.dims, derive_seed(seed_j, "splice"))
            trace = f"splice:{grid}"
        elif op == "blur":
            length = int(rng.integers(cfg.blur_range[0], cfg.blur_range[1] + 1))
            out_sample = Sample(gaussian_blur(base.image, length), base.mask.copy())
            trace = f"blur:L={length}"
        elif op == "occlude":
            other = pool[int(rng.integers(0, len(pool)))]
            out_sample = occlude(base, other, cfg.occlude_area, derive_seed(seed_j, "occlude"))
            trace = "occlude"
        else:
            out_sample = perspective(base, cfg.max_jitter, derive_seed(seed_j, "warp"))
            trace = f"perspective:j={cfg.max_jitter:g}"
        records.append(
            EmitRecord(
                sample_id=f"aug_{j:05d}",
                image=out_sample.image,
                mask=out_sample.mask,
                class_id=meta[base_idx].class_id,
                prompt="",
                seed=seed_j,
                augment_trace=trace,
            )
        )
    emit(records, Path(args.out), palette=config.palette)
    print(json.dumps({"augmented": len(records), "out": str(args.out)}))
    return 0


def cmd_emit(args: argparse.Namespace) -> int:
    config = _config_for(args)
    manifest = load_manifest(Path(args.source))
    root = Path(args.source)
    records = []
    for row in manifest.samples:
        records.append(
            EmitRecord(
                sample_id=row.sample_id,
                image=rasters.load_image(root / row.image_path),
                mask=rasters.load_mask(root / row.mask_path),
                class_id=row.class_id,
                prompt=row.prompt,
                seed=row.seed,
                gamma_hat=row.gamma_hat,
                q=row.q,
                pruned=row.pruned,
                augment_trace=row.augment_trace,
            )
        )
    palette = args.palette or config.palette
    emit(records, Path(args.out), palette=palette)
    print(json.dumps({"samples": len(records), "out": str(args.out)}))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    pred_dir = Path(args.pred)
    gt_dir = Path(args.gt)
    if not gt_dir.is_dir():
        raise ValidationError(f"no such ground-truth directory: {gt_dir}")
    gt_masks = {p.stem: rasters.load_mask(p) for p in sorted(gt_dir.glob("*.png"))}
    if not gt_masks:
        raise ValidationError(f"{gt_dir}: no ground-truth masks")
    predictions = {}
    for stem in gt_masks:
        pred_path = pred_dir / f"{stem}.png"
        if not pred_path.is_file():
            raise ValidationError(f"missing prediction for sample {stem!r}")
        predictions[stem] = rasters.load_mask(pred_path)
    class_ids = [int(c) for c in args.classes.split(",")]
    report = evaluate_miou(predictions, gt_masks, class_ids)
    payload = json.dumps(report.to_json(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return 0


def cmd_fixture(args: argparse.Namespace) -> int:
    config = _config_for(args)
    fixture_set = write_fixture_set(Path(args.out), args.count, config.fixture, config.seed)
    print(
        json.dumps(
            {"count": len(fixture_set.bundle_dirs), "out": str(fixture_set.root)}
        )
    )
    return 0


def cmd_pipeline(args: argparse.Namespace) -> int:
    config = _config_for(args)
    if args.out:
        config = replace(config, out_dir=str(args.out))
    manifest = run_pipeline(config)
    kept = sum(1 for s in manifest.samples if not s.pruned)
    print(
        json.dumps(
            {"samples": len(manifest.samples), "train": kept, "out": config.out_dir}
        )
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration")
    common.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    common.add_argument("--jobs", type=int, metavar="N", help="worker threads for per-sample stages")

    parser = argparse.ArgumentParser(
        prog="attnmask",
        description="Build segmentation masks and datasets from diffusion cross-attention bundles.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("aggregate", parents=[common], help="fuse a bundle's attention maps into one map")
    p.add_argument("--bundle", required=True, help="bundle directory")
    p.add_argument("--token-text", help="class word to look up in the token list")
    p.add_argument("--token-indices", help="comma-separated token indices")
    p.add_argument("--target", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--out", required=True, help="output .npy map")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("binarize", parents=[common], help="threshold a map, fixed or adaptive")
    p.add_argument("--map", required=True, help=".npy probability map")
    p.add_argument("--gamma", type=float, help="fixed threshold in (0,1)")
    p.add_argument("--affinity", help="affinity mask PNG for adaptive search")
    p.add_argument("--out", required=True, help="output mask PNG")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("refine", parents=[common], help="mean-field CRF refinement")
    p.add_argument("--image", required=True)
    p.add_argument("--map", required=True, help=".npy probability map or mask PNG")
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--posterior", help="also save the posterior as .npy")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("affinity", parents=[common], help="seeded affinity propagation")
    p.add_argument("--image", required=True)
    p.add_argument("--map", required=True, help=".npy probability map")
    p.add_argument("--out", required=True, help="output affinity mask PNG")
    p.set_defaults(func=cmd_affinity)

    p = sub.add_parser("score", parents=[common], help="cross-validated quality scores")
    p.add_argument("--records", required=True, help="CSV: sample_id,class_id,mask_path")
    p.add_argument("--predictions", required=True, help="directory of {sample_id}.png predictions")
    p.add_argument("--out", required=True, help="output scores CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("prune", parents=[common], help="flag the lowest-q fraction per class")
    p.add_argument("--scores", required=True, help="scores CSV from `score`")
    p.add_argument("--alpha", type=float, required=True, help="fraction to prune per class")
    p.add_argument("--out", required=True, help="output CSV with pruned flags")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("augment", parents=[common], help="augment an emitted dataset")
    p.add_argument("--dataset", required=True, help="dataset directory with manifest.json")
    p.add_argument("--count", type=int, help="number of augmented samples")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("emit", parents=[common], help="re-emit a dataset tree (e.g. with palette)")
    p.add_argument("--source", required=True, help="dataset directory with manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--palette", action="store_true", help="write palette-indexed masks")
    p.set_defaults(func=cmd_emit)

    p = sub.add_parser("eval", parents=[common], help="mean IoU of predictions vs ground truth")
    p.add_argument("--pred", required=True, help="directory of predicted masks")
    p.add_argument("--gt", required=True, help="directory of ground-truth masks")
    p.add_argument("--classes", required=True, help="comma-separated class ids")
    p.add_argument("--out", help="write the JSON report here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fixture", parents=[common], help="generate synthetic bundles with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("pipeline", parents=[common], help="run the full dataset pipeline")
    p.add_argument("--out", help="override the configured output directory")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BrokenPipeError:
        return 1
    except Exception as exc:  # runtime failure: distinct exit code for scripting
        log.error("%s", exc, exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
