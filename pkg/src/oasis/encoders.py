"""Learned feature extractors: multi-scale image encoder, memory encoder, and
the memory bank update rule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import (N_SCALES, FeaturePyramid, FrameTensor, InvalidInputError, MemoryState,
                    ProbMask)

EMA_DECAY = 0.8


@dataclass
class ImageEncoderConfig:
    channels_per_scale: list = field(default_factory=lambda: [32, 64, 128])
    pretrained: bool = False

    def __post_init__(self):
        ch = list(self.channels_per_scale)
        if len(ch) != N_SCALES or any(b <= a for a, b in zip(ch, ch[1:])) or ch[0] <= 0:
            raise InvalidInputError(f"channels_per_scale must be {N_SCALES} strictly increasing "
                                    f"positive ints, got {ch}")
        if self.pretrained:
            raise InvalidInputError("pretrained backbones are not bundled")
        self.channels_per_scale = ch

    @classmethod
    def paper(cls) -> "ImageEncoderConfig":
        return cls([64, 128, 256])


@dataclass
class MemoryEncoderConfig:
    object_dim: int = 256
    object_grid: int = 30
    global_dim: int = 128
    capacity: int = 5
    update_interval: int = 5

    def __post_init__(self):
        for name in ("object_dim", "object_grid", "global_dim", "capacity", "update_interval"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")


def _norm(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, c), c)


class ResBlock(nn.Module):
    """Two 3x3 convolutions with a (projected) identity shortcut."""

    def __init__(self, cin: int, cout: int, stride: int = 1, slope: float = 0.0, norm: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=not norm)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=not norm)
        self.n1 = _norm(cout) if norm else nn.Identity()
        self.n2 = _norm(cout) if norm else nn.Identity()
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride, bias=False)
        self.slope = slope

    def forward(self, x):
        act = lambda t: F.leaky_relu(t, self.slope) if self.slope else F.relu(t)
        y = act(self.n1(self.conv1(x)))
        y = self.n2(self.conv2(y))
        s = x if self.skip is None else self.skip(x)
        return act(y + s)


class _Trunk(nn.Module):
    def __init__(self, cin: int, channels: list):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Sequential(nn.Conv2d(cin, c1, 3, 2, 1, bias=False), _norm(c1), nn.ReLU())
        self.stages = nn.ModuleList([ResBlock(c1, c1, 2), ResBlock(c1, c2, 2), ResBlock(c2, c3, 2)])

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def _check_size(h: int, w: int):
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise InvalidInputError(f"input size {h}x{w} must be >= 16 and divisible by 16")


class ImageEncoder(nn.Module):
    """Residual backbone producing features at strides 4, 8 and 16."""

    def __init__(self, cfg: ImageEncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or ImageEncoderConfig()
        self.trunk = _Trunk(3, self.cfg.channels_per_scale)

    @property
    def channels(self) -> list:
        return list(self.cfg.channels_per_scale)

    def forward(self, images: torch.Tensor) -> list:
        _check_size(*images.shape[-2:])
        return self.trunk((images - 0.5) / 0.25)


def encode_image(frame: FrameTensor, encoder: ImageEncoder) -> FeaturePyramid:
    """Feature pyramid of a single frame (levels without batch axis)."""
    levels = encoder(frame.to_tensor())
    return FeaturePyramid(tuple(l[0] for l in levels), (frame.height, frame.width))


class MemoryEncoder(nn.Module):
    """Encodes frame + mask into a global memory feature and per-object summaries.

    Object features are the global feature soft-masked by each object's
    probability, projected to ``object_dim`` (bias-free) and resized to the
    fixed object grid.
    """

    def __init__(self, cfg: MemoryEncoderConfig | None = None, channels: list | None = None):
        super().__init__()
        self.cfg = cfg or MemoryEncoderConfig()
        channels = channels or [32, 64, 128]
        self.trunk = _Trunk(4, channels)
        self.to_global = nn.Conv2d(channels[-1], self.cfg.global_dim, 1)
        self.to_object = nn.Conv2d(self.cfg.global_dim, self.cfg.object_dim, 1, bias=False)

    def encode_global(self, images: torch.Tensor, foreground: torch.Tensor) -> torch.Tensor:
        x = torch.cat([(images - 0.5) / 0.25, foreground * 2 - 1], dim=1)
        return self.to_global(self.trunk(x)[-1])

    def project_objects(self, global_feat: torch.Tensor, object_probs: torch.Tensor) -> torch.Tensor:
        """[B, C_g, h, w] x [B, K-1, H, W] -> [B, K-1, C_obj, G, G]."""
        B, n_obj = object_probs.shape[:2]
        h, w = global_feat.shape[-2:]
        m = F.interpolate(object_probs, size=(h, w), mode="area")
        masked = global_feat.unsqueeze(1) * m.unsqueeze(2)  # B, K-1, C_g, h, w
        proj = self.to_object(masked.flatten(0, 1))
        g = self.cfg.object_grid
        proj = F.interpolate(proj, size=(g, g), mode="bilinear", align_corners=False)
        return proj.view(B, n_obj, self.cfg.object_dim, g, g)

    def forward(self, images: torch.Tensor, probs: torch.Tensor):
        """``probs`` is [B, K, H, W] with background first; returns (global, objects)."""
        _check_size(*images.shape[-2:])
        if probs.shape[1] < 2:
            raise InvalidInputError("memory encoding needs at least one object channel")
        if tuple(probs.shape[-2:]) != tuple(images.shape[-2:]):
            raise InvalidInputError("mask and frame sizes differ")
        global_feat = self.encode_global(images, 1 - probs[:, :1])
        return global_feat, self.project_objects(global_feat, probs[:, 1:])


def encode_memory(frame: FrameTensor, probs: ProbMask, encoder: MemoryEncoder):
    """Single-frame memory encoding: ([C_g, H/16, W/16], [K-1, C_obj, 30, 30])."""
    p = probs.probs
    p = p if isinstance(p, torch.Tensor) else torch.as_tensor(np.asarray(p), dtype=torch.float32)
    if p.shape[0] < 2:
        raise InvalidInputError("memory encoding needs at least one object channel")
    if tuple(p.shape[-2:]) != (frame.height, frame.width):
        raise InvalidInputError("mask and frame sizes differ")
    g, objs = encoder(frame.to_tensor(), p.unsqueeze(0).float())
    return g[0], objs[0]


def should_store(frame_index: int, update_interval: int) -> bool:
    return frame_index == 0 or frame_index % update_interval == 0


def memory_update(state: MemoryState, frame_index: int, global_feature: torch.Tensor,
                  object_features: torch.Tensor, update_interval: int = 5) -> MemoryState:
    """Return the memory after (possibly) writing one frame.

    The first stored frame is permanent; other frames are evicted FIFO once
    ``capacity`` is exceeded. Object features follow an EMA (decay 0.8)
    over stored frames.
    """
    if not should_store(frame_index, update_interval):
        return state
    if state.object_features is not None:
        if object_features.shape != state.object_features.shape:
            raise InvalidInputError(f"object features {tuple(object_features.shape)} do not match "
                                    f"memory {tuple(state.object_features.shape)}")
        objs = EMA_DECAY * state.object_features + (1 - EMA_DECAY) * object_features
    else:
        objs = object_features
    feats = list(state.global_features) + [global_feature]
    idx = list(state.stored_frame_indices) + [frame_index]
    while len(feats) > state.capacity:
        drop = 1 if len(feats) > 1 and state.capacity > 1 else len(feats) - 1
        del feats[drop], idx[drop]
    return MemoryState(feats, objs, idx, state.capacity)
