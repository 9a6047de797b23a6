"""A small deterministic latent denoiser with text cross-attention.

The network runs on a 4x64x64 latent and attends to the prompt at seven
sites: three on the way down (64, 32, 16), one at the 8x8 bottleneck,
and three on the way up (16, 32, 64). Each site computes multi-head
softmax attention from pixels to tokens; the per-head probabilities are
what capture records, averaged over heads. Weights are drawn once from
a fixed generator, so every process builds the identical model and the
whole sampler is a pure function of (prompt, seed, steps).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

LATENT_SIZE = 64
LATENT_CHANNELS = 4
TEXT_DIM = 32
TIME_DIM = 16
HEADS = 2
HEAD_DIM = 8
WEIGHT_SEED = 715517
MODEL_ID = "sdexport-tiny-v1"

_CHANNELS = {64: 16, 32: 24, 16: 32, 8: 40}


@dataclass(frozen=True)
class AttentionSite:
    """One cross-attention location: stable id, grid size, block name."""

    layer_id: int
    resolution: int
    block: str


# layer_id doubles as the block identity: ids 0..2 are the downsampling
# path, 3 is the bottleneck, 4..6 the upsampling path. Two sites can
# share a resolution (16 appears at ids 2 and 4) and stay distinguishable.
ATTENTION_SITES = (
    AttentionSite(0, 64, "down0"),
    AttentionSite(1, 32, "down1"),
    AttentionSite(2, 16, "down2"),
    AttentionSite(3, 8, "mid"),
    AttentionSite(4, 16, "up0"),
    AttentionSite(5, 32, "up1"),
    AttentionSite(6, 64, "up2"),
)


def _position_encoding(index: int) -> torch.Tensor:
    half = TEXT_DIM // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float32) * (-math.log(10000.0) / (half - 1))
    )
    angles = freqs * float(index)
    return torch.cat([torch.sin(angles), torch.cos(angles)])


def embed_tokens(pieces: Sequence[str]) -> torch.Tensor:
    """Map token texts to (tokens, TEXT_DIM) embeddings.

    Each piece hashes to its own generator seed, so the content vector
    depends only on the text; a sinusoidal position vector is added on
    top. No vocabulary file is involved.
    """
    rows = []
    for index, piece in enumerate(pieces):
        digest = hashlib.blake2b(piece.encode("utf-8"), digest_size=8).digest()
        generator = torch.Generator()
        generator.manual_seed(int.from_bytes(digest, "little"))
        content = torch.randn(TEXT_DIM, generator=generator)
        rows.append(content + _position_encoding(index))
    return torch.stack(rows)


def _time_embedding(step_frac: float) -> torch.Tensor:
    half = TIME_DIM // 2
    freqs = torch.exp(
        torch.arange(half, dtype=torch.float32) * (-math.log(1000.0) / (half - 1))
    )
    angles = freqs * (1000.0 * float(step_frac))
    return torch.cat([torch.sin(angles), torch.cos(angles)])


class CrossAttention(nn.Module):
    """Multi-head softmax attention from latent pixels to prompt tokens."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        inner = HEADS * HEAD_DIM
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, inner, bias=False)
        self.to_k = nn.Linear(TEXT_DIM, inner, bias=False)
        self.to_v = nn.Linear(TEXT_DIM, inner, bias=False)
        self.to_out = nn.Linear(inner, channels, bias=False)

    def forward(self, x: torch.Tensor, text: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (pixels, channels); text: (tokens, TEXT_DIM).

        Returns (residual update, per-head probabilities) where the
        probabilities have shape (HEADS, pixels, tokens) and each pixel
        row sums to one within every head.
        """
        pixels = x.shape[0]
        tokens = text.shape[0]
        q = self.to_q(self.norm(x)).reshape(pixels, HEADS, HEAD_DIM)
        k = self.to_k(text).reshape(tokens, HEADS, HEAD_DIM)
        v = self.to_v(text).reshape(tokens, HEADS, HEAD_DIM)
        logits = torch.einsum("phd,thd->hpt", q, k) / math.sqrt(HEAD_DIM)
        probs = torch.softmax(logits, dim=-1)
        mixed = torch.einsum("hpt,thd->phd", probs, v).reshape(pixels, HEADS * HEAD_DIM)
        return self.to_out(mixed), probs


class LatentDenoiser(nn.Module):
    """Noise predictor whose cross-attention maps are the capture product."""

    def __init__(self) -> None:
        super().__init__()
        ch = _CHANNELS
        self.conv_in = nn.Conv2d(LATENT_CHANNELS, ch[64], 3, padding=1)
        self.down1 = nn.Conv2d(ch[64], ch[32], 3, stride=2, padding=1)
        self.down2 = nn.Conv2d(ch[32], ch[16], 3, stride=2, padding=1)
        self.down3 = nn.Conv2d(ch[16], ch[8], 3, stride=2, padding=1)
        self.up1 = nn.ConvTranspose2d(ch[8], ch[16], 4, stride=2, padding=1)
        self.up2 = nn.ConvTranspose2d(ch[16], ch[32], 4, stride=2, padding=1)
        self.up3 = nn.ConvTranspose2d(ch[32], ch[64], 4, stride=2, padding=1)
        self.conv_out = nn.Conv2d(ch[64], LATENT_CHANNELS, 3, padding=1)
        self.time_by_res = nn.ModuleDict(
            {str(res): nn.Linear(TIME_DIM, ch[res]) for res in (64, 32, 16, 8)}
        )
        self.attention = nn.ModuleDict(
            {str(site.layer_id): CrossAttention(ch[site.resolution]) for site in ATTENTION_SITES}
        )
        self.decode_conv1 = nn.Conv2d(LATENT_CHANNELS, 12, 3, padding=1)
        self.decode_conv2 = nn.Conv2d(12, 3, 3, padding=1)

    def forward(
        self,
        latent: torch.Tensor,
        step_frac: float,
        text: torch.Tensor,
        keep_heads: bool = False,
    ) -> tuple[torch.Tensor, dict[int, torch.Tensor], dict[int, torch.Tensor]]:
        """Predict noise for one step and record attention at every site.

        latent: (LATENT_CHANNELS, 64, 64); step_frac in [0, 1); text:
        (tokens, TEXT_DIM). Returns (noise, maps, heads) where maps maps
        layer_id to head-averaged probabilities of shape (pixels, tokens)
        and heads holds the raw (HEADS, pixels, tokens) stacks when
        keep_heads is set, else stays empty.
        """
        t = _time_embedding(step_frac)
        maps: dict[int, torch.Tensor] = {}
        heads: dict[int, torch.Tensor] = {}

        def attend(x: torch.Tensor, layer_id: int) -> torch.Tensor:
            _, c, h, w = x.shape
            flat = x[0].reshape(c, h * w).transpose(0, 1)
            update, probs = self.attention[str(layer_id)](flat, text)
            maps[layer_id] = probs.mean(dim=0)
            if keep_heads:
                heads[layer_id] = probs
            return x + update.transpose(0, 1).reshape(1, c, h, w)

        def timed(x: torch.Tensor, res: int) -> torch.Tensor:
            return x + self.time_by_res[str(res)](t).reshape(1, -1, 1, 1)

        x = latent.unsqueeze(0)
        x64 = attend(F.silu(timed(self.conv_in(x), 64)), 0)
        x32 = attend(F.silu(timed(self.down1(x64), 32)), 1)
        x16 = attend(F.silu(timed(self.down2(x32), 16)), 2)
        x8 = attend(F.silu(timed(self.down3(x16), 8)), 3)
        u16 = attend(F.silu(timed(self.up1(x8), 16)) + x16, 4)
        u32 = attend(F.silu(timed(self.up2(u16), 32)) + x32, 5)
        u64 = attend(F.silu(timed(self.up3(u32), 64)) + x64, 6)
        noise = self.conv_out(u64).squeeze(0)
        return noise, maps, heads

    def decode(self, latent: torch.Tensor) -> np.ndarray:
        """Map a final latent to an RGB uint8 image of the latent size."""
        x = latent.unsqueeze(0)
        x = F.silu(self.decode_conv1(x))
        x = torch.sigmoid(self.decode_conv2(x))
        image = (x[0] * 255.0).round().clamp(0, 255).to(torch.uint8)
        return image.permute(1, 2, 0).contiguous().numpy()


def _reset_parameters(model: nn.Module, generator: torch.Generator) -> None:
    """Fill weights from one generator in declaration order.

    Matrix and kernel weights get scaled gaussians, norm gains one,
    biases zero. Declaration order is stable, so the fill is too.
    """
    with torch.no_grad():
        for name, param in model.named_parameters():
            if param.dim() >= 2:
                fan_in = int(param.shape[1]) * int(param[0, 0].numel())
                values = torch.randn(param.shape, generator=generator)
                param.copy_(values / math.sqrt(fan_in))
            elif name.endswith(".weight"):
                param.fill_(1.0)
            else:
                param.fill_(0.0)


@lru_cache(maxsize=1)
def load_model() -> LatentDenoiser:
    """Build the fixed model; repeated calls share one instance."""
    model = LatentDenoiser()
    generator = torch.Generator()
    generator.manual_seed(WEIGHT_SEED)
    _reset_parameters(model, generator)
    model.eval()
    return model
