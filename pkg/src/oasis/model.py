"""The assembled segmentation network and its configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import torch
import torch.nn as nn

from .decoder import MaskDecoder, MaskDecoderConfig, aggregate_logits
from .edges import CannyConfig, FusionConfig, fuse, structure_guide
from .encoders import ImageEncoder, ImageEncoderConfig, MemoryEncoder, MemoryEncoderConfig
from .structure import StructureDecoder, StructureDecoderConfig


@dataclass
class ModelConfig:
    image: ImageEncoderConfig = field(default_factory=ImageEncoderConfig)
    # desk clips are 8 frames of fast motion; storing every 5th frame would keep only frames 0 and 5
    memory: MemoryEncoderConfig = field(default_factory=lambda: MemoryEncoderConfig(update_interval=1))
    structure: StructureDecoderConfig = field(default_factory=StructureDecoderConfig)
    mask: MaskDecoderConfig = field(default_factory=MaskDecoderConfig)
    canny: CannyConfig = field(default_factory=CannyConfig)
    # raw logits scale most features by about -10 in small models trained from scratch
    fusion: FusionConfig = field(default_factory=lambda: FusionConfig(structure_activation="sigmoid"))
    use_structure_decoder: bool = True
    boundary_width: int = 2

    @classmethod
    def paper(cls) -> "ModelConfig":
        return cls(image=ImageEncoderConfig.paper(),
                   memory=MemoryEncoderConfig(global_dim=256, update_interval=5),
                   structure=StructureDecoderConfig.paper(),
                   mask=MaskDecoderConfig(decoder_channels=[256, 128, 64]),
                   fusion=FusionConfig(structure_activation="logits"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(image=ImageEncoderConfig(**d["image"]), memory=MemoryEncoderConfig(**d["memory"]),
                   structure=StructureDecoderConfig(**d["structure"]),
                   mask=MaskDecoderConfig(**d["mask"]), canny=CannyConfig(**d["canny"]),
                   fusion=FusionConfig(**d["fusion"]),
                   use_structure_decoder=d["use_structure_decoder"],
                   boundary_width=d["boundary_width"])


class SegmentOutput(NamedTuple):
    logits: torch.Tensor  # [B, K-1, H, W]
    probs: torch.Tensor  # [B, K, H, W]
    raw: torch.Tensor  # [B, K, H, W] aggregated log-odds
    structure: torch.Tensor | None  # [B, 1, H, W]


class OASIS(nn.Module):
    """Memory-based segmenter with edge highlighting and structure refinement."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        ch = self.cfg.image.channels_per_scale
        obj_dim = self.cfg.memory.object_dim
        self.image_encoder = ImageEncoder(self.cfg.image)
        self.memory_encoder = MemoryEncoder(self.cfg.memory, ch)
        self.structure_decoder = None
        if self.cfg.use_structure_decoder:
            self.structure_decoder = StructureDecoder(ch, obj_dim, self.cfg.structure)
        self.mask_decoder = MaskDecoder(ch, obj_dim, self.cfg.mask)

    def backbone_parameters(self) -> list:
        return list(self.image_encoder.parameters()) + list(self.memory_encoder.trunk.parameters())

    def memorize(self, images: torch.Tensor, probs: torch.Tensor):
        return self.memory_encoder(images, probs)

    def segment(self, images: torch.Tensor, edges: torch.Tensor, object_memory: torch.Tensor,
                use_structure: bool = True) -> SegmentOutput:
        size = tuple(images.shape[-2:])
        levels = self.image_encoder(images)
        enhanced = [fuse(l, edges, self.cfg.fusion.epsilon) for l in levels]
        structure = None
        if use_structure and self.structure_decoder is not None:
            structure = self.structure_decoder(enhanced, object_memory, size)
            guide = structure_guide(structure, self.cfg.fusion)
            feats = [fuse(l, guide, self.cfg.fusion.beta) for l in levels]
        else:
            feats = enhanced
        logits = self.mask_decoder(feats, object_memory, size)
        probs, raw = aggregate_logits(logits, dim=1)
        return SegmentOutput(logits, probs, raw, structure)


def count_parameters(module: nn.Module | None) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters())


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> OASIS:
    torch.manual_seed(seed)
    return OASIS(cfg)
