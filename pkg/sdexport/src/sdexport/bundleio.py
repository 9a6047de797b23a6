"""Writer for the attention bundle directory format.

A bundle directory holds image.png (RGB), manifest.json, and one binary
file per (layer, timestep, token) attention map. Map files start with a
16-byte little-endian header: magic b"ATTN", format version u16, height
u32, width u32, two padding bytes; row-major float32 values follow. The
manifest is serialized with sorted keys, two-space indent, and a
trailing newline, and entries are written in (layer_id, timestep,
token_index) order, so identical captures produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

MAGIC = b"ATTN"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
IMAGE_NAME = "image.png"

_HEADER = struct.Struct("<4sHII2x")


@dataclass(frozen=True)
class MapEntry:
    """One attention map scheduled for writing."""

    layer_id: int
    timestep: int
    token_index: int
    data: np.ndarray

    def key(self) -> tuple[int, int, int]:
        return (self.layer_id, self.timestep, self.token_index)

    def filename(self) -> str:
        return f"attn_{self.layer_id}_{self.timestep}_{self.token_index}.bin"


def write_map_file(path: Path, data: np.ndarray) -> None:
    """Write one 2-d float32 map with its binary header."""
    height, width = data.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, height, width)
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes(order="C")
    path.write_bytes(header + payload)


def write_bundle_dir(
    out_dir: str | Path,
    image: np.ndarray,
    prompt: str,
    tokens: Sequence[tuple[int, str]],
    entries: Sequence[MapEntry],
    seed: int,
    model_id: str,
) -> Path:
    """Write a complete bundle directory and return its path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image, mode="RGB").save(out / IMAGE_NAME)
    ordered = sorted(entries, key=MapEntry.key)
    meta = []
    for entry in ordered:
        write_map_file(out / entry.filename(), entry.data)
        height, width = entry.data.shape
        meta.append(
            {
                "layer_id": int(entry.layer_id),
                "timestep": int(entry.timestep),
                "token_index": int(entry.token_index),
                "h": int(height),
                "w": int(width),
                "file": entry.filename(),
            }
        )
    manifest = {
        "image": IMAGE_NAME,
        "prompt": prompt,
        "tokens": [[int(index), str(text)] for index, text in tokens],
        "entries": meta,
        "seed": int(seed),
        "model_id": model_id,
    }
    body = json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    (out / MANIFEST_NAME).write_text(body, encoding="utf-8")
    return out
