"""Attention bundle interchange format.

A bundle is a directory holding everything one text-to-image sampling run
produced for one prompt: the decoded image, the token list, and one raw
cross-attention map per (layer, timestep, token). Exporters write bundles;
everything downstream only ever reads them, so the on-disk layout is the
compatibility contract:

    manifest.json                     keys: image, prompt, tokens, entries,
                                      seed, model_id
    image.png                         RGB
    attn_{layer}_{timestep}_{token}.bin   16-byte header + float32 payload

Tensor file header, little-endian: magic b"ATTN", format version u16,
height u32, width u32, two zero pad bytes (16 bytes total). The payload is
height*width float32 values in row-major order. Bit-exact round-trips are
required, which is why the payload is raw bytes and not a compressed image.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BundleFormatError, ValidationError
from .rasters import load_image, save_image

MAGIC = b"ATTN"
FORMAT_VERSION = 1
ALLOWED_MAP_SIZES = (8, 16, 32, 64)
MANIFEST_NAME = "manifest.json"
IMAGE_NAME = "image.png"

# magic, version, height, width, 2 pad bytes -> 16 bytes
_HEADER = struct.Struct("<4sHII2x")
HEADER_SIZE = _HEADER.size
SOFTMAX_TOL = 1e-3


@dataclass(frozen=True)
class Violation:
    """One finding from bundle validation.

    Advisory findings describe suspicious but tolerated content (for now
    only token-sum drift on complete bundles); they never block IO.
    """

    code: str
    message: str
    advisory: bool = False

    def __str__(self) -> str:
        tag = "advisory" if self.advisory else "error"
        return f"[{tag}] {self.code}: {self.message}"


@dataclass(eq=False)
class AttentionEntry:
    """One raw cross-attention map for (layer_id, timestep, token_index)."""

    layer_id: int
    timestep: int
    token_index: int
    map: np.ndarray

    def key(self) -> tuple[int, int, int]:
        return (self.layer_id, self.timestep, self.token_index)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionEntry):
            return NotImplemented
        return self.key() == other.key() and np.array_equal(self.map, other.map)


@dataclass(eq=False)
class AttentionBundle:
    """In-memory form of one exported sampling run."""

    image: np.ndarray
    prompt: str
    tokens: list[tuple[int, str]]
    entries: list[AttentionEntry]
    seed: int
    model_id: str

    def entry_index(self) -> dict[tuple[int, int, int], AttentionEntry]:
        return {e.key(): e for e in self.entries}

    def token_indices(self) -> set[int]:
        return {i for i, _ in self.tokens}

    def __eq__(self, other: object) -> bool:
        # Entries compare as a keyed set: the writer lays files out in
        # sorted key order, so list order is not part of bundle identity.
        if not isinstance(other, AttentionBundle):
            return NotImplemented
        if (self.prompt, self.seed, self.model_id) != (other.prompt, other.seed, other.model_id):
            return False
        if list(self.tokens) != list(other.tokens):
            return False
        if not np.array_equal(self.image, other.image):
            return False
        mine = sorted(self.entries, key=AttentionEntry.key)
        theirs = sorted(other.entries, key=AttentionEntry.key)
        return len(mine) == len(theirs) and all(a == b for a, b in zip(mine, theirs))


def validate_bundle(
    bundle: AttentionBundle,
    softmax_tol: float = SOFTMAX_TOL,
    allowed_sizes: Iterable[int] = ALLOWED_MAP_SIZES,
) -> list[Violation]:
    """Check every structural invariant; return all findings, worst first.

    An empty report means the bundle is safe to write and consume. The
    token-sum check only applies to (layer, timestep) groups that carry a
    map for every prompt token; exporters may legitimately dump a subset
    of tokens, in which case sums over the kept subset prove nothing.
    """
    findings: list[Violation] = []
    sizes = set(int(s) for s in allowed_sizes)

    img = np.asarray(bundle.image)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        findings.append(Violation("image-shape", f"image must be (H, W, 3) uint8, got {img.shape} {img.dtype}"))
    elif img.shape[0] < 8 or img.shape[1] < 8:
        findings.append(Violation("image-shape", f"image sides must be >= 8 px, got {img.shape[:2]}"))

    if not isinstance(bundle.prompt, str) or not bundle.prompt:
        findings.append(Violation("prompt", "prompt must be a non-empty string"))

    token_ids: set[int] = set()
    for pos, item in enumerate(bundle.tokens):
        try:
            idx, text = item
        except (TypeError, ValueError):
            findings.append(Violation("tokens", f"token #{pos} is not an (index, text) pair: {item!r}"))
            continue
        if not isinstance(idx, int) or isinstance(idx, bool) or not isinstance(text, str):
            findings.append(Violation("tokens", f"token #{pos} must be (int, str), got {item!r}"))
            continue
        if idx in token_ids:
            findings.append(Violation("tokens", f"duplicate token index {idx}"))
        token_ids.add(idx)
    if not bundle.tokens:
        findings.append(Violation("tokens", "token list is empty"))

    if not isinstance(bundle.seed, int) or isinstance(bundle.seed, bool) or not 0 <= bundle.seed < 2**64:
        findings.append(Violation("seed", f"seed must be an unsigned 64-bit integer, got {bundle.seed!r}"))
    if not isinstance(bundle.model_id, str) or not bundle.model_id:
        findings.append(Violation("model-id", "model_id must be a non-empty string"))

    seen_keys: set[tuple[int, int, int]] = set()
    layer_shape: dict[int, tuple[int, int]] = {}
    for entry in bundle.entries:
        key = entry.key()
        label = f"entry layer={key[0]} t={key[1]} token={key[2]}"
        if key in seen_keys:
            findings.append(Violation("duplicate-entry", f"{label}: duplicate (layer, timestep, token)"))
            continue
        seen_keys.add(key)
        if entry.token_index not in token_ids:
            findings.append(Violation("unknown-token", f"{label}: token index not in token list"))
        arr = np.asarray(entry.map)
        if arr.ndim != 2:
            findings.append(Violation("map-shape", f"{label}: map must be 2-dimensional, got shape {arr.shape}"))
            continue
        if arr.dtype != np.float32:
            findings.append(Violation("map-dtype", f"{label}: map must be float32, got {arr.dtype}"))
        h, w = arr.shape
        if h not in sizes or w not in sizes:
            findings.append(Violation("map-size", f"{label}: sides must be in {sorted(sizes)}, got {h}x{w}"))
        expect = layer_shape.setdefault(entry.layer_id, (h, w))
        if (h, w) != expect:
            findings.append(
                Violation("layer-shape", f"{label}: layer has maps of both {expect} and {(h, w)}")
            )
        if not np.all(np.isfinite(arr)):
            findings.append(Violation("non-finite", f"{label}: map holds NaN or inf"))
        elif arr.size and float(arr.min()) < 0.0:
            findings.append(Violation("negative", f"{label}: map holds negative values"))

    if not findings and token_ids:
        findings.extend(_check_token_sums(bundle, token_ids, softmax_tol))
    return findings


def _check_token_sums(
    bundle: AttentionBundle, token_ids: set[int], tol: float
) -> list[Violation]:
    """For complete (layer, timestep) groups, per-pixel token sums must be 1."""
    findings: list[Violation] = []
    groups: dict[tuple[int, int], list[AttentionEntry]] = {}
    for entry in bundle.entries:
        groups.setdefault((entry.layer_id, entry.timestep), []).append(entry)
    for (layer, t), members in sorted(groups.items()):
        if {e.token_index for e in members} != token_ids:
            continue
        total = np.sum([e.map.astype(np.float64) for e in members], axis=0)
        drift = float(np.abs(total - 1.0).max())
        if drift > tol:
            findings.append(
                Violation(
                    "token-sum",
                    f"layer={layer} t={t}: token maps sum to 1 +/- {drift:.3g} per pixel (tol {tol:g})",
                    advisory=True,
                )
            )
    return findings


def blocking_violations(report: list[Violation]) -> list[Violation]:
    return [v for v in report if not v.advisory]


def entry_filename(layer_id: int, timestep: int, token_index: int) -> str:
    return f"attn_{layer_id}_{timestep}_{token_index}.bin"


def write_tensor(arr: np.ndarray, path: Path) -> None:
    """Serialize one float32 map with the 16-byte binary header."""
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim != 2:
        raise ValidationError(f"tensor must be 2-dimensional, got shape {arr.shape}")
    h, w = arr.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, h, w)
    payload = arr.astype("<f4", copy=False).tobytes(order="C")
    path.write_bytes(header + payload)


def read_tensor(path: Path) -> np.ndarray:
    """Read one map written by write_tensor, verifying the header."""
    blob = path.read_bytes()
    if len(blob) < HEADER_SIZE:
        raise BundleFormatError(f"{path.name}: truncated header ({len(blob)} bytes)")
    magic, version, h, w = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BundleFormatError(f"{path.name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise BundleFormatError(f"{path.name}: unsupported format version {version}")
    expected = HEADER_SIZE + 4 * h * w
    if len(blob) != expected:
        raise BundleFormatError(
            f"{path.name}: payload size mismatch, header says {h}x{w} "
            f"({expected} bytes total), file has {len(blob)}"
        )
    arr = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE).reshape(h, w)
    if np.isnan(arr).any():
        raise BundleFormatError(f"{path.name}: NaN in payload")
    return arr.astype(np.float32, copy=True)


def write_bundle(bundle: AttentionBundle, path: str | Path) -> Path:
    """Write a validated bundle to a directory; fails on any non-advisory finding.

    Output is byte-identical for equal bundles: entries land in sorted key
    order and the manifest is serialized with sorted keys.
    """
    report = validate_bundle(bundle)
    blocking = blocking_violations(report)
    if blocking:
        raise ValidationError(
            "bundle failed validation: " + "; ".join(str(v) for v in blocking)
        )
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)

    save_image(bundle.image, path / IMAGE_NAME)
    entries_meta = []
    for entry in sorted(bundle.entries, key=AttentionEntry.key):
        name = entry_filename(*entry.key())
        write_tensor(entry.map, path / name)
        h, w = entry.map.shape
        entries_meta.append(
            {
                "layer_id": entry.layer_id,
                "timestep": entry.timestep,
                "token_index": entry.token_index,
                "h": int(h),
                "w": int(w),
                "file": name,
            }
        )
    manifest = {
        "image": IMAGE_NAME,
        "prompt": bundle.prompt,
        "tokens": [[i, s] for i, s in bundle.tokens],
        "entries": entries_meta,
        "seed": bundle.seed,
        "model_id": bundle.model_id,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    (path / MANIFEST_NAME).write_text(text, encoding="utf-8")
    return path


def read_bundle(path: str | Path) -> AttentionBundle:
    """Load a bundle directory, re-running validation on the result.

    Structural violations raise; advisory findings (token-sum drift) are
    tolerated on load exactly as they are tolerated by validate_bundle.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise BundleFormatError(f"{path}: missing {MANIFEST_NAME}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if not isinstance(manifest, dict):
        raise BundleFormatError(f"{manifest_path}: manifest must be a JSON object")
    for field_name in ("image", "prompt", "tokens", "entries", "seed", "model_id"):
        if field_name not in manifest:
            raise BundleFormatError(f"{manifest_path}: missing field {field_name!r}")

    image = load_image(path / manifest["image"])
    try:
        tokens = [(int(i), str(s)) for i, s in manifest["tokens"]]
    except (TypeError, ValueError) as exc:
        raise BundleFormatError(f"{manifest_path}: malformed token list ({exc})") from exc

    entries = []
    for meta in manifest["entries"]:
        try:
            name = meta["file"]
            entry = AttentionEntry(
                layer_id=int(meta["layer_id"]),
                timestep=int(meta["timestep"]),
                token_index=int(meta["token_index"]),
                map=read_tensor(path / name),
            )
        except KeyError as exc:
            raise BundleFormatError(f"{manifest_path}: entry missing field {exc}") from exc
        except FileNotFoundError as exc:
            raise BundleFormatError(f"{path}: missing tensor file {meta.get('file')!r}") from exc
        declared = (int(meta.get("h", -1)), int(meta.get("w", -1)))
        if declared != entry.map.shape:
            raise BundleFormatError(
                f"{name}: manifest says {declared}, tensor header says {entry.map.shape}"
            )
        entries.append(entry)

    bundle = AttentionBundle(
        image=image,
        prompt=str(manifest["prompt"]),
        tokens=tokens,
        entries=entries,
        seed=int(manifest["seed"]),
        model_id=str(manifest["model_id"]),
    )
    blocking = blocking_violations(validate_bundle(bundle))
    if blocking:
        raise BundleFormatError(
            f"{path}: bundle failed validation on load: "
            + "; ".join(str(v) for v in blocking)
        )
    return bundle
