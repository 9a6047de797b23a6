"""Attention capture: run the fixed sampler and write one bundle.

capture() samples an image from (prompt, seed, steps) with a plain
Euler update on the latent, records the head-averaged cross-attention
probabilities at every selected site and step, and writes the bundle
directory. The timestep recorded per map is the zero-based sampling
step index.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bundleio import MapEntry, write_bundle_dir
from .errors import ExportError
from .model import (
    ATTENTION_SITES,
    LATENT_CHANNELS,
    LATENT_SIZE,
    MODEL_ID,
    embed_tokens,
    load_model,
)
from .tokenizer import token_lookup, tokenize

ALLOWED_LAYER_SIZES = (8, 16, 32, 64)
TOKEN_MODES = ("all", "class")


@dataclass(frozen=True)
class CaptureConfig:
    """One capture request.

    layers selects attention sites by grid resolution; every site whose
    resolution is listed gets recorded. tokens chooses between dumping
    maps for every prompt token ("all") or only the sub-word tokens of
    class_word ("class").
    """

    prompt: str
    seed: int
    steps: int
    out_dir: str
    layers: tuple[int, ...] = field(default=ALLOWED_LAYER_SIZES)
    tokens: str = "all"
    class_word: str | None = None

    def validate(self) -> None:
        if not isinstance(self.prompt, str) or not self.prompt.strip():
            raise ExportError("prompt must be a non-empty string")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ExportError("seed must be an integer")
        if not 0 <= self.seed < 2**64:
            raise ExportError("seed must lie in [0, 2**64)")
        if not isinstance(self.steps, int) or isinstance(self.steps, bool) or self.steps < 1:
            raise ExportError("steps must be a positive integer")
        if not self.layers:
            raise ExportError("layers must name at least one resolution")
        bad = sorted(set(self.layers) - set(ALLOWED_LAYER_SIZES))
        if bad:
            raise ExportError(
                f"unsupported layer resolutions {bad}; allowed: {list(ALLOWED_LAYER_SIZES)}"
            )
        if len(set(self.layers)) != len(self.layers):
            raise ExportError("layers must not repeat")
        if self.tokens not in TOKEN_MODES:
            raise ExportError(f"tokens must be one of {TOKEN_MODES}")
        if self.tokens == "class" and not self.class_word:
            raise ExportError("tokens='class' requires class_word")


def _kept_token_indices(config: CaptureConfig, piece_count: int) -> list[int]:
    if config.tokens == "class":
        return token_lookup(config.prompt, config.class_word or "")
    return list(range(piece_count))


def capture(config: CaptureConfig) -> Path:
    """Sample once and write the attention bundle; returns its directory.

    Every sampling step contributes one map per selected site and kept
    token. Maps are softmax probabilities averaged over heads and
    reshaped to the site's square grid, so for a full-token capture the
    per-pixel sum over tokens at any (site, step) is one.
    """
    config.validate()
    pieces, _ = tokenize(config.prompt)
    tokens = [(index, piece) for index, piece in enumerate(pieces)]
    keep = _kept_token_indices(config, len(pieces))
    sites = [site for site in ATTENTION_SITES if site.resolution in config.layers]
    model = load_model()
    text = embed_tokens(pieces)
    entries: list[MapEntry] = []
    with torch.no_grad():
        generator = torch.Generator()
        generator.manual_seed(config.seed)
        latent = torch.randn(
            LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE, generator=generator
        )
        for step in range(config.steps):
            noise, maps, _ = model(latent, step / config.steps, text)
            for site in sites:
                grid = maps[site.layer_id]
                for token_index in keep:
                    plane = grid[:, token_index].reshape(site.resolution, site.resolution)
                    entries.append(
                        MapEntry(
                            layer_id=site.layer_id,
                            timestep=step,
                            token_index=token_index,
                            data=np.ascontiguousarray(plane.numpy(), dtype=np.float32),
                        )
                    )
            latent = latent - noise / config.steps
        image = model.decode(latent)
    return write_bundle_dir(
        config.out_dir,
        image=image,
        prompt=config.prompt,
        tokens=tokens,
        entries=entries,
        seed=config.seed,
        model_id=MODEL_ID,
    )


def raw_head_maps(config: CaptureConfig, step: int, layer_id: int) -> tuple[np.ndarray, np.ndarray]:
    """Replay one capture up to a step and dump that site's raw attention.

    Returns (per_head, averaged): the (HEADS, pixels, tokens) softmax
    stack and the head mean actually written by capture(). Lets callers
    audit the head averaging against unaveraged probabilities.
    """
    config.validate()
    if not 0 <= step < config.steps:
        raise ExportError(f"step {step} outside [0, {config.steps})")
    if layer_id not in {site.layer_id for site in ATTENTION_SITES}:
        raise ExportError(f"unknown layer_id {layer_id}")
    pieces, _ = tokenize(config.prompt)
    model = load_model()
    text = embed_tokens(pieces)
    with torch.no_grad():
        generator = torch.Generator()
        generator.manual_seed(config.seed)
        latent = torch.randn(
            LATENT_CHANNELS, LATENT_SIZE, LATENT_SIZE, generator=generator
        )
        for current in range(step + 1):
            keep_heads = current == step
            noise, maps, heads = model(
                latent, current / config.steps, text, keep_heads=keep_heads
            )
            latent = latent - noise / config.steps
    per_head = heads[layer_id].numpy().astype(np.float64)
    averaged = maps[layer_id].numpy().astype(np.float64)
    return per_head, averaged
