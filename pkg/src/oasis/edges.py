"""Non-learned edge machinery: Canny edges, ground-truth structure maps, and
the two Hadamard feature-fusion operators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .types import (EdgeMap, FeaturePyramid, FrameTensor, IdMask, InvalidInputError,
                    StructureKind, StructureMap)

LUMA = np.array([0.299, 0.587, 0.114])

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class CannyConfig:
    low_threshold: float = 50.0
    high_threshold: float = 200.0
    gaussian_sigma: float = 1.4
    l2_gradient: bool = True

    def __post_init__(self):
        if not 0 < self.low_threshold < self.high_threshold:
            raise InvalidInputError("need 0 < low_threshold < high_threshold")
        if self.gaussian_sigma <= 0:
            raise InvalidInputError("gaussian_sigma must be positive")


STRUCTURE_ACTIVATIONS = ("logits", "sigmoid")


@dataclass(frozen=True)
class FusionConfig:
    epsilon: float = 0.5
    beta: float = 1.0
    # how predicted structure logits enter refinement: "logits" uses them as-is,
    # "sigmoid" squashes them to boundary probabilities first
    structure_activation: str = "logits"

    def __post_init__(self):
        for name in ("epsilon", "beta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise InvalidInputError(f"{name} must be finite and nonnegative")
        if self.structure_activation not in STRUCTURE_ACTIVATIONS:
            raise InvalidInputError(f"structure_activation must be one of {STRUCTURE_ACTIVATIONS}")


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def to_gray255(rgb: np.ndarray) -> np.ndarray:
    """[3, H, W] in [0, 1] -> [H, W] luminance on the 0-255 scale."""
    return np.tensordot(LUMA, np.asarray(rgb, dtype=np.float64), axes=(0, 0)) * 255.0


def gradients(gray: np.ndarray, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-smoothed Sobel gradients (gx, gy) with replicated borders."""
    k = gaussian_kernel1d(sigma)
    smooth = ndimage.correlate1d(gray, k, axis=0, mode="nearest")
    smooth = ndimage.correlate1d(smooth, k, axis=1, mode="nearest")
    gx = ndimage.correlate(smooth, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(smooth, SOBEL_Y, mode="nearest")
    return gx, gy


def _non_max_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    H, W = mag.shape
    padded = np.pad(mag, 1, mode="constant")
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    # direction bins: 0 (horizontal gradient), 45, 90, 135 degrees
    bins = (np.floor((angle + 22.5) / 45.0).astype(int)) % 4
    offsets = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros_like(mag, dtype=bool)
    for b, (dy, dx) in offsets.items():
        fwd = padded[1 + dy:1 + dy + H, 1 + dx:1 + dx + W]
        bwd = padded[1 - dy:1 - dy + H, 1 - dx:1 - dx + W]
        # strict on one side, non-strict on the other: plateaus keep one pixel
        sel = (bins == b) & (mag > bwd) & (mag >= fwd)
        keep |= sel
    return keep


def canny_gray(gray255: np.ndarray, cfg: CannyConfig = CannyConfig()) -> np.ndarray:
    """Canny edges of a [H, W] 0-255 image, returned as a bool array."""
    gray255 = np.asarray(gray255, dtype=np.float64)
    support = 2 * int(math.ceil(3 * cfg.gaussian_sigma)) + 1
    if min(gray255.shape) < support:
        raise InvalidInputError(f"image {gray255.shape} smaller than Gaussian support {support}")
    gx, gy = gradients(gray255, cfg.gaussian_sigma)
    if cfg.l2_gradient:
        mag = np.hypot(gx, gy)
    else:
        mag = np.abs(gx) + np.abs(gy)
    # snap away float noise so symmetric plateaus tie exactly
    mag = np.round(mag, 6)
    thin = _non_max_suppression(mag, gx, gy) & (mag > 0)
    weak = thin & (mag >= cfg.low_threshold)
    strong = thin & (mag >= cfg.high_threshold)
    labels, n = ndimage.label(weak, structure=_EIGHT)
    if n == 0:
        return np.zeros_like(weak)
    seeded = np.zeros(n + 1, dtype=bool)
    seeded[np.unique(labels[strong])] = True
    seeded[0] = False
    return seeded[labels]


def canny(frame: FrameTensor, cfg: CannyConfig = CannyConfig()) -> EdgeMap:
    """Binary Canny edge map of a frame; thresholds on the 0-255 gradient scale."""
    edges = canny_gray(to_gray255(frame.pixels), cfg)
    return EdgeMap(edges[None].astype(np.float32))


def structure_labels(labels: np.ndarray, boundary_width: int = 2) -> np.ndarray:
    """Binary map of pixels within ``boundary_width - 1`` (Chebyshev) of a label change."""
    if boundary_width < 2:
        raise InvalidInputError("boundary_width must be >= 2")
    size = 2 * (boundary_width - 1) + 1
    labels = np.asarray(labels)
    hi = ndimage.maximum_filter(labels, size=size, mode="nearest")
    lo = ndimage.minimum_filter(labels, size=size, mode="nearest")
    return (hi != lo).astype(np.float32)


def gt_structure_map(mask: IdMask, boundary_width: int = 2) -> StructureMap:
    """Ground-truth structure map: boundaries between objects and against background."""
    s = structure_labels(mask.labels, boundary_width)
    return StructureMap(s[None], StructureKind.GROUND_TRUTH_BINARY)


def fuse(features: torch.Tensor, guide: torch.Tensor, factor: float) -> torch.Tensor:
    """x + x * (factor * resize(guide)); guide is [..., 1, H, W], broadcast over channels."""
    h, w = features.shape[-2:]
    g = guide
    squeeze = g.dim() == 3
    if squeeze:
        g = g.unsqueeze(0)
    if tuple(g.shape[-2:]) != (h, w):
        g = F.interpolate(g, size=(h, w), mode="bilinear", align_corners=False)
    if squeeze:
        g = g.squeeze(0)
    return features + features * (factor * g)


def _guide_tensor(values, like: torch.Tensor) -> torch.Tensor:
    if isinstance(values, torch.Tensor):
        return values.to(dtype=like.dtype, device=like.device)
    return torch.as_tensor(np.asarray(values), dtype=like.dtype, device=like.device)


def _fuse_pyramid(pyramid: FeaturePyramid, guide_values, factor: float) -> FeaturePyramid:
    guide = _guide_tensor(guide_values, pyramid[0])
    if guide.dim() < 3 or guide.shape[-3] != 1:
        raise InvalidInputError(f"guide map must be [..., 1, H, W], got {tuple(guide.shape)}")
    if tuple(guide.shape[-2:]) != tuple(pyramid.image_size):
        raise InvalidInputError(f"guide map size {tuple(guide.shape[-2:])} does not match "
                                f"frame size {tuple(pyramid.image_size)}")
    return pyramid.with_levels([fuse(lvl, guide, factor) for lvl in pyramid.levels])


def edge_highlight(pyramid: FeaturePyramid, edges: EdgeMap | torch.Tensor,
                   cfg: FusionConfig = FusionConfig()) -> FeaturePyramid:
    """Amplify features along Canny edges, weighted by ``cfg.epsilon``."""
    values = edges.values if isinstance(edges, EdgeMap) else edges
    return _fuse_pyramid(pyramid, values, cfg.epsilon)


def structure_refine(pyramid: FeaturePyramid, structure: StructureMap | torch.Tensor,
                     cfg: FusionConfig = FusionConfig()) -> FeaturePyramid:
    """Amplify features by predicted structure logits, weighted by ``cfg.beta``."""
    if isinstance(structure, StructureMap):
        if structure.kind is not StructureKind.PREDICTED_LOGITS:
            raise InvalidInputError("structure_refine expects predicted logits")
        structure = structure.values
    like = pyramid[0]
    return _fuse_pyramid(pyramid, structure_guide(_guide_tensor(structure, like), cfg), cfg.beta)


def structure_guide(logits: torch.Tensor, cfg: FusionConfig) -> torch.Tensor:
    """The map multiplied into features during refinement."""
    return torch.sigmoid(logits) if cfg.structure_activation == "sigmoid" else logits
