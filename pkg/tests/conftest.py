"""Shared test helpers: small bundle builders and directory hashing."""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
import pytest

from attnmask.bundle import AttentionBundle, AttentionEntry


def make_entry(layer: int, t: int, token: int, values) -> AttentionEntry:
    return AttentionEntry(
        layer_id=layer,
        timestep=t,
        token_index=token,
        map=np.asarray(values, dtype=np.float32),
    )


def make_bundle(
    entries,
    tokens=None,
    image=None,
    prompt="a photo of a blob",
    seed=7,
    model_id="test-model",
) -> AttentionBundle:
    if tokens is None:
        token_ids = sorted({e.token_index for e in entries})
        tokens = [(i, f"tok{i}") for i in token_ids]
    if image is None:
        image = np.zeros((16, 16, 3), dtype=np.uint8)
    return AttentionBundle(
        image=image,
        prompt=prompt,
        tokens=tokens,
        entries=list(entries),
        seed=seed,
        model_id=model_id,
    )


def random_bundle(rng: np.random.Generator, sizes=(8, 16), n_tokens=2) -> AttentionBundle:
    tokens = [(i, f"tok{i}") for i in range(n_tokens)]
    entries = []
    for layer, size in enumerate(sizes):
        for t in (1, 5):
            for token in range(n_tokens):
                entries.append(
                    make_entry(layer, t, token, rng.random((size, size), dtype=np.float32) + 0.01)
                )
    image = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    return make_bundle(entries, tokens=tokens, image=image, seed=int(rng.integers(0, 2**63)))


def tree_digest(root: Path) -> str:
    """Stable digest of a directory tree: relative paths + file bytes."""
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(b"\0")
            digest.update(path.read_bytes())
            digest.update(b"\0")
    return digest.hexdigest()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240816)
