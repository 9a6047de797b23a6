"""End-to-end orchestration: bundles in, dataset tree out.

Per sample: aggregate the class token's attention, extract seeds and
propagate an affinity mask, pick the threshold that matches it, refine
the thresholded mask with the mean-field CRF, and clean small components.
Then cross-validate quality scores over the whole batch, prune the
noisiest fraction per class, augment the survivors, and emit the tree.

Per-sample work is pure given the derived seed, so the parallel path and
the serial path produce identical results.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .affinity import extract_seeds, propagate
from .aggregate import aggregate, find_token_group
from .augment import (
    Sample,
    SpliceGrid,
    gaussian_blur,
    occlude,
    perspective,
    splice,
)
from .binarize import adaptive_threshold
from .bundle import AttentionBundle, read_bundle
from .config import PipelineConfig
from .crf import meanfield_refine, unary_from_prob
from .dataset import DatasetManifest, EmitRecord, clean_mask, emit
from .errors import StageError, ValidationError
from .fixtures import gen_fixture
from .noiselearn import (
    DirectoryPredictionProvider,
    RefinementProxyPredictor,
    SampleRecord,
    kfold_split,
    prune_by_class,
    score_out_of_sample,
)
from .prompts import (
    CaptionBank,
    Prompt,
    PromptTemplate,
    expand_templates,
    load_subclass_list,
    retrieval_pool,
    sample_prompt,
)
from .seeding import derive_seed

log = logging.getLogger(__name__)


@dataclass(eq=False)
class StageResult:
    """Everything the per-sample stages produced for one input."""

    sample_id: str
    image: np.ndarray
    prob_map: np.ndarray
    candidate: np.ndarray
    gamma_hat: float
    prompt: str
    seed: int


def build_prompt_pool(config: PipelineConfig) -> list[Prompt] | None:
    cfg = config.prompts
    if not cfg.enabled:
        return None
    templates = [PromptTemplate(t, cfg.context) for t in cfg.templates]
    if not templates:
        raise ValidationError("prompt stage enabled but no templates configured")
    if cfg.retrieval:
        if not cfg.caption_bank:
            raise ValidationError("retrieval enabled but no caption bank configured")
        bank = CaptionBank.load(cfg.caption_bank)
        k = len(templates)
        if cfg.subclass_file:
            k *= len(load_subclass_list(cfg.subclass_file))
        return retrieval_pool(
            config.class_name, config.class_id, bank, k, cfg.captions_per_template
        )
    if not cfg.subclass_file:
        raise ValidationError("template expansion needs a subclass_file")
    subclasses = load_subclass_list(cfg.subclass_file)
    return expand_templates(config.class_name, config.class_id, subclasses, templates)


def _load_inputs(
    config: PipelineConfig, pool: list[Prompt] | None
) -> list[tuple[str, AttentionBundle, int]]:
    """Resolve config sources to (sample_id, bundle, sample_seed) triples."""
    inputs = []
    if config.bundle_dirs:
        for i, bundle_dir in enumerate(config.bundle_dirs):
            sample_id = f"{config.class_name}_{i:05d}"
            try:
                bundle = read_bundle(Path(bundle_dir))
            except Exception as exc:
                raise StageError(sample_id, "read_bundle", exc) from exc
            inputs.append((sample_id, bundle, derive_seed(config.seed, "sample", i)))
        return inputs

    for i in range(config.sample_count):
        sample_id = f"{config.class_name}_{i:05d}"
        sample_seed = derive_seed(config.seed, "sample", i)
        prompt_text = None
        if pool:
            prompt_text = sample_prompt(pool, derive_seed(config.seed, "prompt", i)).text
        spec = config.fixture
        if spec.class_name != config.class_name or spec.class_id != config.class_id:
            raise ValidationError(
                "fixture class settings must match the pipeline class "
                f"({spec.class_name}/{spec.class_id} vs {config.class_name}/{config.class_id})"
            )
        try:
            bundle, _ = gen_fixture(spec, sample_seed, prompt=prompt_text)
        except Exception as exc:
            raise StageError(sample_id, "gen_fixture", exc) from exc
        inputs.append((sample_id, bundle, sample_seed))
    return inputs


def process_sample(
    sample_id: str,
    bundle: AttentionBundle,
    sample_seed: int,
    config: PipelineConfig,
) -> StageResult:
    """Run the per-sample mask derivation stages, tagging failures."""

    def run(stage: str, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise StageError(sample_id, stage, exc) from exc

    height, width = bundle.image.shape[:2]
    token_group = run("token_lookup", find_token_group, bundle, config.class_name)
    prob = run(
        "aggregate",
        aggregate,
        bundle,
        token_group,
        (height, width),
        reducer=config.reducer,
        normalize_after_upsample=config.normalize_after_upsample,
    )

    aff_cfg = config.affinity
    seeds = run("extract_seeds", extract_seeds, prob, aff_cfg.theta_hi, aff_cfg.theta_lo)
    affinity_mask = run(
        "propagate",
        propagate,
        bundle.image,
        seeds,
        sigma_c=aff_cfg.sigma_c,
        tol=aff_cfg.tol,
        max_iter=aff_cfg.max_iter,
    )

    omega = config.thresholds.search_space()
    if config.refine_before_threshold:
        posterior, _ = run(
            "meanfield_refine",
            meanfield_refine,
            bundle.image,
            unary_from_prob(prob, config.crf.epsilon),
            config.crf,
        )
        gamma_hat, refined = run("adaptive_threshold", adaptive_threshold, posterior, affinity_mask, omega)
    else:
        gamma_hat, coarse = run("adaptive_threshold", adaptive_threshold, prob, affinity_mask, omega)
        _, refined = run(
            "meanfield_refine",
            meanfield_refine,
            bundle.image,
            unary_from_prob(coarse.astype(np.float64), config.crf.epsilon),
            config.crf,
        )

    candidate = run("clean_mask", clean_mask, refined, config.clean_min_area)
    return StageResult(
        sample_id=sample_id,
        image=bundle.image,
        prob_map=prob,
        candidate=candidate,
        gamma_hat=gamma_hat,
        prompt=bundle.prompt,
        seed=sample_seed,
    )


def _augment_kept(
    results: list[StageResult],
    config: PipelineConfig,
) -> list[EmitRecord]:
    cfg = config.augment
    if not cfg.enabled or cfg.count < 1 or not results:
        return []
    pool = [
        Sample(r.image, (r.candidate * config.class_id).astype(np.uint8)) for r in results
    ]
    grids = tuple(SpliceGrid(r, c) for r, c in cfg.grids)
    records = []
    for j in range(cfg.count):
        seed_j = derive_seed(config.seed, "augment", j)
        rng = np.random.default_rng(seed_j)
        op = cfg.ops[int(rng.integers(0, len(cfg.ops)))]
        base = pool[int(rng.integers(0, len(pool)))]
        if op == "splice":
            grid = grids[int(rng.integers(0, len(grids)))]
            out = splice(pool, grid, base.dims, derive_seed(seed_j, "splice"))
            trace = f"splice:{grid}"
        elif op == "blur":
            length = int(rng.integers(cfg.blur_range[0], cfg.blur_range[1] + 1))
            out = Sample(gaussian_blur(base.image, length), base.mask.copy())
            trace = f"blur:L={length}"
        elif op == "occlude":
            other = pool[int(rng.integers(0, len(pool)))]
            out = occlude(base, other, cfg.occlude_area, derive_seed(seed_j, "occlude"))
            trace = "occlude"
        else:
            out = perspective(base, cfg.max_jitter, derive_seed(seed_j, "warp"))
            trace = f"perspective:j={cfg.max_jitter:g}"
        records.append(
            EmitRecord(
                sample_id=f"{config.class_name}_aug_{j:05d}",
                image=out.image,
                mask=out.mask,
                class_id=config.class_id,
                prompt="",
                seed=seed_j,
                augment_trace=trace,
            )
        )
    return records


def run_pipeline(config: PipelineConfig) -> DatasetManifest:
    """Execute every stage and write the dataset tree; returns the manifest."""
    pool = build_prompt_pool(config)
    inputs = _load_inputs(config, pool)

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as executor:
            results = list(
                executor.map(
                    lambda item: process_sample(item[0], item[1], item[2], config), inputs
                )
            )
    else:
        results = [process_sample(sid, b, s, config) for sid, b, s in inputs]

    records = [
        SampleRecord(sample_id=r.sample_id, class_id=config.class_id, candidate_mask=r.candidate)
        for r in results
    ]
    folds = kfold_split(
        {config.class_id: [r.sample_id for r in records]},
        k=config.noise.folds,
        seed=derive_seed(config.seed, "folds"),
    )
    if config.noise.prediction_dir:
        predictor = DirectoryPredictionProvider(config.noise.prediction_dir)
    else:
        predictor = RefinementProxyPredictor(
            prob_maps={r.sample_id: r.prob_map for r in results},
            images={r.sample_id: r.image for r in results},
            gamma_by_id={r.sample_id: r.gamma_hat for r in results},
            crf_params=replace(config.crf, iterations=config.noise.proxy_iterations),
            epsilon=config.crf.epsilon,
        )
    try:
        scored = score_out_of_sample(records, folds, predictor)
    except Exception as exc:
        raise StageError("<batch>", "score_out_of_sample", exc) from exc
    kept, pruned = prune_by_class(scored, config.noise.alpha)
    pruned_ids = {r.sample_id for r in pruned}
    log.info("pruned %d of %d samples", len(pruned), len(scored))

    by_id = {r.sample_id: r for r in results}
    q_by_id = {r.sample_id: r.q for r in scored}
    emit_records = []
    for result in results:
        emit_records.append(
            EmitRecord(
                sample_id=result.sample_id,
                image=result.image,
                mask=(result.candidate * config.class_id).astype(np.uint8),
                class_id=config.class_id,
                prompt=result.prompt,
                seed=result.seed,
                gamma_hat=result.gamma_hat,
                q=q_by_id[result.sample_id],
                pruned=result.sample_id in pruned_ids,
            )
        )
    kept_results = [by_id[r.sample_id] for r in kept]
    emit_records.extend(_augment_kept(kept_results, config))
    return emit(emit_records, Path(config.out_dir), palette=config.palette)
