"""Cross-attention maps to segmentation masks and synthetic datasets.

The package consumes attention bundles written by a diffusion exporter
(or the built-in fixture generator), derives per-pixel masks through
aggregation, adaptive thresholding, affinity matching and CRF refinement,
scores and prunes noisy samples, augments the survivors, and emits a
ready-to-train segmentation dataset.
"""

from .aggregate import aggregate, find_token_group, normalize_map, upsample
from .augment import Sample, SpliceGrid, gaussian_blur, occlude, perspective, splice
from .binarize import adaptive_threshold, default_search_space, iou, threshold
from .bundle import (
    AttentionBundle,
    AttentionEntry,
    Violation,
    read_bundle,
    validate_bundle,
    write_bundle,
)
from .config import PipelineConfig, load_config
from .crf import CrfParams, meanfield_refine, unary_from_prob
from .affinity import extract_seeds, load_affinity, propagate, solve_harmonic
from .dataset import (
    DatasetManifest,
    EmitRecord,
    EvalReport,
    clean_mask,
    emit,
    evaluate_miou,
    load_manifest,
)
from .errors import (
    AttnMaskError,
    BundleFormatError,
    DegenerateMapError,
    StageError,
    ValidationError,
)
from .fixtures import FixtureSpec, gen_fixture, write_fixture_set
from .noiselearn import (
    FoldAssignment,
    SampleRecord,
    kfold_split,
    prune_by_class,
    score_out_of_sample,
    self_confidence,
)
from .pipeline import run_pipeline
from .prompts import (
    CaptionBank,
    Prompt,
    PromptTemplate,
    expand_templates,
    retrieve_captions,
    sample_prompt,
)

__version__ = "0.1.0"

__all__ = [
    "AttentionBundle",
    "AttentionEntry",
    "AttnMaskError",
    "BundleFormatError",
    "CaptionBank",
    "CrfParams",
    "DatasetManifest",
    "DegenerateMapError",
    "EmitRecord",
    "EvalReport",
    "FixtureSpec",
    "FoldAssignment",
    "PipelineConfig",
    "Prompt",
    "PromptTemplate",
    "Sample",
    "SampleRecord",
    "SpliceGrid",
    "StageError",
    "ValidationError",
    "Violation",
    "adaptive_threshold",
    "aggregate",
    "clean_mask",
    "default_search_space",
    "emit",
    "evaluate_miou",
    "expand_templates",
    "extract_seeds",
    "find_token_group",
    "gaussian_blur",
    "gen_fixture",
    "iou",
    "kfold_split",
    "load_affinity",
    "load_config",
    "load_manifest",
    "meanfield_refine",
    "normalize_map",
    "occlude",
    "perspective",
    "propagate",
    "prune_by_class",
    "read_bundle",
    "retrieve_captions",
    "run_pipeline",
    "sample_prompt",
    "score_out_of_sample",
    "self_confidence",
    "solve_harmonic",
    "splice",
    "threshold",
    "unary_from_prob",
    "upsample",
    "validate_bundle",
    "write_bundle",
    "write_fixture_set",
]
