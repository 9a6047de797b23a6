"""TOML run configuration for the pipeline and CLI.

Every knob has a default matching the module-level constants, so an empty
config runs the fixture demo end to end. Unknown keys are rejected: a
typo silently falling back to a default is the worst failure mode a
reproducibility tool can have.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path
from typing import Any

import numpy as np

try:
    import tomllib as _toml
except ModuleNotFoundError:  # Python < 3.11
    import tomli as _toml

from . import affinity, augment, binarize, noiselearn
from .crf import CrfParams
from .errors import ValidationError
from .fixtures import FixtureSpec


@dataclass(frozen=True)
class AffinityConfig:
    theta_hi: float = affinity.THETA_HI
    theta_lo: float = affinity.THETA_LO
    sigma_c: float = affinity.SIGMA_C
    tol: float = affinity.TOL
    max_iter: int = affinity.MAX_ITER


@dataclass(frozen=True)
class ThresholdConfig:
    omega_start: float = binarize.OMEGA_START
    omega_stop: float = binarize.OMEGA_STOP
    omega_step: float = binarize.OMEGA_STEP

    def search_space(self) -> np.ndarray:
        if not 0.0 < self.omega_start <= self.omega_stop < 1.0 or self.omega_step <= 0.0:
            raise ValidationError(
                f"bad threshold search space [{self.omega_start}, {self.omega_stop}] step {self.omega_step}"
            )
        count = int(round((self.omega_stop - self.omega_start) / self.omega_step)) + 1
        return np.round(self.omega_start + self.omega_step * np.arange(count), 10)


@dataclass(frozen=True)
class NoiseConfig:
    folds: int = noiselearn.DEFAULT_FOLDS
    alpha: float = noiselearn.PRUNE_ALPHA
    proxy_iterations: int = 2
    prediction_dir: str | None = None


@dataclass(frozen=True)
class PromptConfig:
    enabled: bool = False
    templates: tuple[str, ...] = ()
    context: str | None = None
    subclass_file: str | None = None
    caption_bank: str | None = None
    retrieval: bool = False
    captions_per_template: int = 4


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    count: int = 4
    ops: tuple[str, ...] = ("splice", "blur", "occlude", "perspective")
    grids: tuple[tuple[int, int], ...] = augment.DEFAULT_SPLICE_GRIDS
    blur_range: tuple[int, int] = (augment.BLUR_MIN_LEN, augment.BLUR_MAX_LEN)
    occlude_area: tuple[float, float] = augment.OCCLUDE_AREA_RANGE
    max_jitter: float = augment.MAX_CORNER_JITTER

    def __post_init__(self):
        known = {"splice", "blur", "occlude", "perspective"}
        bad = [op for op in self.ops if op not in known]
        if bad:
            raise ValidationError(f"unknown augmentation ops {bad}, known: {sorted(known)}")


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: str = "dataset_out"
    seed: int = 0
    jobs: int = 1
    sample_count: int = 20
    bundle_dirs: tuple[str, ...] = ()
    class_name: str = "blob"
    class_id: int = 1
    clean_min_area: int = 8
    refine_before_threshold: bool = False
    normalize_after_upsample: bool = False
    reducer: str = "mean"
    palette: bool = False
    fixture: FixtureSpec = field(default_factory=FixtureSpec)
    thresholds: ThresholdConfig = field(default_factory=ThresholdConfig)
    affinity: AffinityConfig = field(default_factory=AffinityConfig)
    crf: CrfParams = field(default_factory=CrfParams)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    prompts: PromptConfig = field(default_factory=PromptConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.sample_count < 1 and not self.bundle_dirs:
            raise ValidationError("sample_count must be positive for fixture runs")
        if self.jobs < 1:
            raise ValidationError(f"jobs must be at least 1, got {self.jobs}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError(f"seed {self.seed} outside [0, 2**64)")
        if self.reducer not in ("mean", "max"):
            raise ValidationError(f"unknown reducer {self.reducer!r}")


def _build(cls, data: dict[str, Any], where: str):
    names = {f.name for f in dc_fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValidationError(f"unknown config keys in [{where}]: {unknown}")
    kwargs = {}
    for f in dc_fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"bad value in [{where}]: {exc}") from exc


_SECTIONS = {
    "fixture": FixtureSpec,
    "thresholds": ThresholdConfig,
    "affinity": AffinityConfig,
    "crf": CrfParams,
    "noise": NoiseConfig,
    "prompts": PromptConfig,
    "augment": AugmentConfig,
}


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    data = dict(data)
    kwargs: dict[str, Any] = {}
    for section, cls in _SECTIONS.items():
        if section in data:
            raw = data.pop(section)
            if not isinstance(raw, dict):
                raise ValidationError(f"config section [{section}] must be a table")
            kwargs[section] = _build(cls, raw, section)
    top = _build(PipelineConfig, data, "top level")
    # Re-build with the parsed sections attached.
    merged = {f.name: getattr(top, f.name) for f in dc_fields(PipelineConfig)}
    merged.update(kwargs)
    return PipelineConfig(**merged)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = _toml.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}")
    except _toml.TOMLDecodeError as exc:
        raise ValidationError(f"{path}: invalid TOML ({exc})") from exc
    return config_from_dict(data)
