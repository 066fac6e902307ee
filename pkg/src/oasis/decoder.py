"""Segmentation head: object-memory readout, upsampling decoder and soft
aggregation into a per-pixel distribution over objects."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .structure import UpsampleSkipDecoder
from .types import FeaturePyramid, InvalidInputError, MemoryState, ProbMask

PROB_CLAMP = 1e-7


@dataclass
class MaskDecoderConfig:
    readout_dim: int = 128
    num_readout_heads: int = 4
    decoder_channels: list = field(default_factory=lambda: [128, 64, 32])

    def __post_init__(self):
        if self.readout_dim % self.num_readout_heads:
            raise InvalidInputError("readout_dim must be divisible by num_readout_heads")
        if len(self.decoder_channels) != 3:
            raise InvalidInputError("decoder_channels needs one entry per scale")
        self.decoder_channels = list(self.decoder_channels)


def position_encoding(h: int, w: int, dim: int, device=None) -> torch.Tensor:
    """Sin/cos features of normalized pixel-centre coordinates, [h*w, dim]."""
    ys = (torch.arange(h, device=device, dtype=torch.float32) + 0.5) / h * 2 - 1
    xs = (torch.arange(w, device=device, dtype=torch.float32) + 0.5) / w * 2 - 1
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    n_freq = dim // 4
    freqs = math.pi * 2.0 ** torch.linspace(0, 3, n_freq, device=device)
    parts = []
    for coord in (yy.reshape(-1), xx.reshape(-1)):
        arg = coord[:, None] * freqs[None]
        parts += [torch.sin(arg), torch.cos(arg)]
    pe = torch.cat(parts, dim=1)
    if pe.shape[1] < dim:
        pe = F.pad(pe, (0, dim - pe.shape[1]))
    return pe


class ObjectReadout(nn.Module):
    """Pixels (queries) attend to one object's flattened memory grid."""

    def __init__(self, pixel_dim: int, object_dim: int, dim: int, heads: int):
        super().__init__()
        self.q = nn.Conv2d(pixel_dim, dim, 1)
        self.k = nn.Linear(object_dim, dim)
        self.v = nn.Linear(object_dim, dim)
        self.out = nn.Linear(dim, dim)
        self.dim, self.heads = dim, heads

    def forward(self, pixels: torch.Tensor, memory: torch.Tensor) -> torch.Tensor:
        """pixels [N, C, h, w], memory [N, C_obj, G, G] -> [N, dim, h, w]."""
        N, _, h, w = pixels.shape
        g = memory.shape[-1]
        d = self.dim // self.heads
        q = self.q(pixels).flatten(2).transpose(1, 2) + position_encoding(h, w, self.dim, pixels.device)
        tokens = memory.flatten(2).transpose(1, 2)
        k = self.k(tokens) + position_encoding(g, g, self.dim, pixels.device)
        v = self.v(tokens)
        q, k, v = (t.view(N, -1, self.heads, d).transpose(1, 2) for t in (q, k, v))
        att = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d), dim=-1)
        out = (att @ v).transpose(1, 2).reshape(N, h * w, self.dim)
        return self.out(out).transpose(1, 2).reshape(N, self.dim, h, w)


class MaskDecoder(nn.Module):
    def __init__(self, pyramid_channels: list, object_dim: int = 256,
                 cfg: MaskDecoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or MaskDecoderConfig()
        c3 = pyramid_channels[-1]
        self.readout = ObjectReadout(c3, object_dim, self.cfg.readout_dim, self.cfg.num_readout_heads)
        self.decoder = UpsampleSkipDecoder(pyramid_channels, self.cfg.decoder_channels,
                                           coarse_in=c3 + self.cfg.readout_dim)

    def forward(self, levels: list, object_memory: torch.Tensor,
                image_size: tuple[int, int]) -> torch.Tensor:
        """Batched levels + memory [B, K-1, C, G, G] -> logits [B, K-1, H, W]."""
        B, n_obj = object_memory.shape[:2]
        rep = [l.repeat_interleave(n_obj, dim=0) for l in levels]
        fine, mid, coarse = rep
        read = self.readout(coarse, object_memory.flatten(0, 1))
        logits = self.decoder(torch.cat([coarse, read], dim=1), mid, fine)
        logits = F.interpolate(logits, size=tuple(image_size), mode="bilinear", align_corners=False)
        return logits.view(B, n_obj, *image_size)


def decode_masks(refined: FeaturePyramid, state: MemoryState, decoder: MaskDecoder) -> torch.Tensor:
    """Per-object logit maps [K-1, H, W] for one frame."""
    if len(state) == 0 or state.object_features is None:
        raise InvalidInputError("memory is empty")
    levels = [l.unsqueeze(0) if l.dim() == 3 else l for l in refined.levels]
    mem = state.object_features
    if mem.dim() == 4:
        mem = mem.unsqueeze(0)
    out = decoder(levels, mem, refined.image_size)
    return out[0] if refined.levels[0].dim() == 3 else out


def aggregate_logits(logits: torch.Tensor, dim: int = -3) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft aggregation of per-object logits.

    Returns (probs, raw) with K = K-1 + 1 channels along ``dim``; background
    is the product of object complements, and probabilities are the
    normalized odds of the clamped per-channel probabilities. ``raw`` holds
    the corresponding log-odds.
    """
    p = torch.sigmoid(logits)
    bg = torch.prod(1 - p, dim=dim, keepdim=True)
    q = torch.cat([bg, p], dim=dim).clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    raw = torch.log(q) - torch.log1p(-q)
    return torch.softmax(raw, dim=dim), raw


def aggregate(logits: torch.Tensor, object_ids=None) -> ProbMask:
    """Combine [K-1, H, W] object logits into a ProbMask."""
    if not torch.all(torch.isfinite(logits)):
        raise InvalidInputError("logits must be finite")
    probs, _ = aggregate_logits(logits, dim=0)
    ids = tuple(object_ids) if object_ids is not None else tuple(range(1, logits.shape[0] + 1))
    return ProbMask(probs, ids)
