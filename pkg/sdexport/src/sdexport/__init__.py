"""Deterministic latent sampler that exports cross-attention bundles.

The package samples a small fixed text-conditioned denoiser and writes
the per-step, per-layer, per-token attention probabilities to the
bundle directory format, ready for downstream mask extraction.
"""

from .bundleio import FORMAT_VERSION, IMAGE_NAME, MAGIC, MANIFEST_NAME, MapEntry
from .capture import ALLOWED_LAYER_SIZES, CaptureConfig, capture, raw_head_maps
from .errors import ExportError
from .model import ATTENTION_SITES, HEADS, MODEL_ID, AttentionSite, load_model
from .tokenizer import MAX_WHOLE_LEN, WordSpan, split_word, token_lookup, tokenize

__version__ = "0.1.0"

__all__ = [
    "ALLOWED_LAYER_SIZES",
    "ATTENTION_SITES",
    "AttentionSite",
    "CaptureConfig",
    "ExportError",
    "FORMAT_VERSION",
    "HEADS",
    "IMAGE_NAME",
    "MAGIC",
    "MANIFEST_NAME",
    "MAX_WHOLE_LEN",
    "MODEL_ID",
    "MapEntry",
    "WordSpan",
    "capture",
    "load_model",
    "raw_head_maps",
    "split_word",
    "token_lookup",
    "tokenize",
]
