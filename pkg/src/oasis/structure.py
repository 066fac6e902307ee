"""Lightweight decoder predicting the target-only structure map from
edge-enhanced features and object memory."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import ResBlock
from .types import (N_SCALES, FeaturePyramid, InvalidInputError, StructureKind, StructureMap)


@dataclass
class StructureDecoderConfig:
    hidden_channels: list = field(default_factory=lambda: [128, 64, 32])
    activation_slope: float = 0.01
    use_object_fusion: bool = True

    def __post_init__(self):
        if len(self.hidden_channels) != N_SCALES or any(c <= 0 for c in self.hidden_channels):
            raise InvalidInputError(f"hidden_channels must be {N_SCALES} positive ints")
        self.hidden_channels = list(self.hidden_channels)

    @classmethod
    def paper(cls) -> "StructureDecoderConfig":
        return cls([256, 128, 64])


class UpsampleSkipDecoder(nn.Module):
    """Coarse-to-fine decoder: residual block at stride 16, then two
    (2x transposed conv, concat skip, residual block) steps, then a 1x1 head.
    Output is at stride 4."""

    def __init__(self, in_channels: list, hidden: list, out_channels: int = 1,
                 slope: float = 0.01, coarse_in: int | None = None):
        super().__init__()
        c1, c2, c3 = in_channels
        h0, h1, h2 = hidden
        self.block0 = ResBlock(coarse_in or c3, h0, slope=slope, norm=False)
        self.up1 = nn.ConvTranspose2d(h0, h1, kernel_size=2, stride=2)
        self.block1 = ResBlock(h1 + c2, h1, slope=slope, norm=False)
        self.up2 = nn.ConvTranspose2d(h1, h2, kernel_size=2, stride=2)
        self.block2 = ResBlock(h2 + c1, h2, slope=slope, norm=False)
        self.head = nn.Conv2d(h2, out_channels, 1)
        self.slope = slope

    def forward(self, coarse: torch.Tensor, mid: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        x = self.block0(coarse)
        x = F.leaky_relu(self.up1(x), self.slope)
        x = self.block1(torch.cat([x, mid], dim=1))
        x = F.leaky_relu(self.up2(x), self.slope)
        x = self.block2(torch.cat([x, fine], dim=1))
        return self.head(x)


class StructureDecoder(nn.Module):
    def __init__(self, pyramid_channels: list, object_dim: int = 256,
                 cfg: StructureDecoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or StructureDecoderConfig()
        self.pyramid_channels = list(pyramid_channels)
        self.object_dim = object_dim
        self.object_proj = None
        if self.cfg.use_object_fusion:
            self.object_proj = nn.Conv2d(object_dim, pyramid_channels[-1], 1)
        self.decoder = UpsampleSkipDecoder(pyramid_channels, self.cfg.hidden_channels,
                                           slope=self.cfg.activation_slope)

    def fuse_objects(self, coarse: torch.Tensor, object_memory: torch.Tensor) -> torch.Tensor:
        """Mean-pool object memory [B, K-1, C, G, G] and add it onto the coarsest level."""
        if object_memory.shape[-3] != self.object_dim:
            raise InvalidInputError(f"object memory has {object_memory.shape[-3]} channels, "
                                    f"expected {self.object_dim}")
        pooled = object_memory.mean(dim=1)
        proj = self.object_proj(pooled)
        proj = F.interpolate(proj, size=coarse.shape[-2:], mode="bilinear", align_corners=False)
        return coarse + proj

    def forward(self, levels: list, object_memory: torch.Tensor | None,
                image_size: tuple[int, int]) -> torch.Tensor:
        """Batched levels -> structure logits [B, 1, H, W]."""
        fine, mid, coarse = levels
        for lvl, c in zip(levels, self.pyramid_channels):
            if lvl.shape[1] != c:
                raise InvalidInputError(f"pyramid level has {lvl.shape[1]} channels, expected {c}")
        if self.cfg.use_object_fusion:
            if object_memory is None:
                raise InvalidInputError("object fusion is enabled but no object memory was given")
            coarse = self.fuse_objects(coarse, object_memory)
        logits = self.decoder(coarse, mid, fine)
        return F.interpolate(logits, size=tuple(image_size), mode="bilinear", align_corners=False)


def predict_structure(enhanced: FeaturePyramid, object_memory: torch.Tensor | None,
                      decoder: StructureDecoder) -> StructureMap:
    """Structure logits [1, H, W] for one frame's edge-enhanced pyramid."""
    levels = [l.unsqueeze(0) if l.dim() == 3 else l for l in enhanced.levels]
    mem = object_memory
    if mem is not None and mem.dim() == 4:
        mem = mem.unsqueeze(0)
    out = decoder(levels, mem, enhanced.image_size)
    if enhanced.levels[0].dim() == 3:
        out = out[0]
    return StructureMap(out, StructureKind.PREDICTED_LOGITS)


def structure_bce(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def structure_supervision_loss(pred: StructureMap, target: StructureMap) -> torch.Tensor:
    """Mean binary cross-entropy with logits over all pixels."""
    if pred.kind is not StructureKind.PREDICTED_LOGITS:
        raise InvalidInputError("pred must be a predicted logit map")
    if target.kind is not StructureKind.GROUND_TRUTH_BINARY:
        raise InvalidInputError("target must be a ground-truth binary map")
    p = pred.values
    t = target.values
    t = t if isinstance(t, torch.Tensor) else torch.as_tensor(t)
    p = p if isinstance(p, torch.Tensor) else torch.as_tensor(p)
    if p.shape != t.shape:
        raise InvalidInputError(f"shape mismatch {tuple(p.shape)} vs {tuple(t.shape)}")
    return structure_bce(p, t)
