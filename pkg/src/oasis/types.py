"""Shared data model: frames, masks, feature pyramids, structure maps and memory."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

Array = Union[np.ndarray, torch.Tensor]

N_SCALES = 3
OBJECT_GRID = 30


class InvalidInputError(ValueError):
    """Raised when an input violates an operation's preconditions."""


def _as_numpy(x: Array) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass(frozen=True)
class FrameTensor:
    """One RGB frame, ``pixels`` shaped [3, H, W] with values in [0, 1]."""

    pixels: np.ndarray
    frame_index: int = 0
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[0] != 3:
            raise InvalidInputError(f"frame pixels must be [3, H, W], got {px.shape}")
        h, w = px.shape[1:]
        if h < 16 or w < 16 or h % 16 or w % 16:
            raise InvalidInputError(f"frame size {h}x{w} must be >= 16 and divisible by 16")
        if not np.all(np.isfinite(px)):
            raise InvalidInputError("frame pixels must be finite")
        if self.frame_index < 0:
            raise InvalidInputError("frame_index must be nonnegative")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    def to_tensor(self) -> torch.Tensor:
        """Batched [1, 3, H, W] float tensor."""
        return torch.from_numpy(self.pixels.copy()).unsqueeze(0)


@dataclass(frozen=True)
class FeaturePyramid:
    """Three feature levels; level i (1-based) is [c_i, H/2^(i+1), W/2^(i+1)].

    Levels may carry a leading batch axis; the shape law is checked on the
    trailing three dimensions.
    """

    levels: tuple
    image_size: tuple[int, int]

    def __post_init__(self):
        levels = tuple(self.levels)
        if len(levels) != N_SCALES:
            raise InvalidInputError(f"expected {N_SCALES} levels, got {len(levels)}")
        H, W = self.image_size
        prev_c = 0
        for i, lvl in enumerate(levels, start=1):
            c, h, w = lvl.shape[-3:]
            if (h, w) != (H // 2 ** (i + 1), W // 2 ** (i + 1)):
                raise InvalidInputError(f"level {i} has spatial size {(h, w)}, expected "
                                        f"{(H // 2 ** (i + 1), W // 2 ** (i + 1))}")
            if c <= prev_c:
                raise InvalidInputError("channel counts must strictly increase across levels")
            prev_c = c
        object.__setattr__(self, "levels", levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    def with_levels(self, levels: Sequence) -> "FeaturePyramid":
        return FeaturePyramid(tuple(levels), self.image_size)


def _sorted_ids(labels: np.ndarray) -> tuple[int, ...]:
    return tuple(int(v) for v in np.unique(labels) if v != 0)


@dataclass(frozen=True)
class IdMask:
    """Integer object-id segmentation; 0 is background.

    ``object_ids`` defaults to the sorted nonzero labels present.
    """

    labels: np.ndarray
    object_ids: tuple[int, ...] = field(default=None)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise InvalidInputError(f"labels must be [H, W], got {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.equal(np.mod(labels, 1), 0)):
                raise InvalidInputError("labels must be integers")
        labels = labels.astype(np.int64)
        if np.any(labels < 0):
            raise InvalidInputError("labels must be nonnegative")
        present = _sorted_ids(labels)
        if self.object_ids is None:
            ids = present
        else:
            ids = tuple(int(i) for i in self.object_ids)
            if any(i <= 0 for i in ids) or len(set(ids)) != len(ids):
                raise InvalidInputError(f"object_ids must be distinct positive ints, got {ids}")
            missing = sorted(set(present) - set(ids))
            if missing:
                raise InvalidInputError(f"label {missing[0]} not in object_ids {ids}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "object_ids", ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, IdMask):
            return NotImplemented
        return self.object_ids == other.object_ids and np.array_equal(self.labels, other.labels)

    __hash__ = None


@dataclass(frozen=True)
class ProbMask:
    """Per-object probabilities [K, H, W], background channel first."""

    probs: Array
    object_ids: tuple[int, ...]

    def __post_init__(self):
        p = _as_numpy(self.probs)
        ids = tuple(int(i) for i in self.object_ids)
        if p.ndim != 3 or p.shape[0] != len(ids) + 1:
            raise InvalidInputError(f"probs shape {p.shape} does not match {len(ids)} objects")
        if np.any(p < -1e-7) or np.any(p > 1 + 1e-7):
            raise InvalidInputError("probabilities must lie in [0, 1]")
        if not np.allclose(p.sum(axis=0), 1.0, atol=1e-5, rtol=0):
            raise InvalidInputError("probabilities must sum to 1 per pixel")
        object.__setattr__(self, "object_ids", ids)

    @property
    def num_channels(self) -> int:
        return len(self.object_ids) + 1


class StructureKind(enum.Enum):
    GROUND_TRUTH_BINARY = "ground_truth_binary"
    PREDICTED_LOGITS = "predicted_logits"


@dataclass(frozen=True)
class StructureMap:
    """Object boundary map [1, H, W]: binary target or predicted logits."""

    values: Array
    kind: StructureKind

    def __post_init__(self):
        v = _as_numpy(self.values)
        if v.ndim < 3 or v.shape[-3] != 1:
            raise InvalidInputError(f"structure map must be [1, H, W], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("structure map must be finite")
        if self.kind is StructureKind.GROUND_TRUTH_BINARY and not np.all((v == 0) | (v == 1)):
            raise InvalidInputError("ground-truth structure map must be binary")


@dataclass(frozen=True)
class EdgeMap:
    """Binary edge map [1, H, W] with values in {0, 1}."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3 or v.shape[0] != 1:
            raise InvalidInputError(f"edge map must be [1, H, W], got {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise InvalidInputError("edge map must be binary")
        object.__setattr__(self, "values", v)


@dataclass
class MemoryState:
    """Rolling memory: global features per stored frame plus object summaries.

    Tensors may carry a leading batch axis. ``object_features`` is
    [..., K-1, C_obj, 30, 30]. Only the owning engine mutates a state.
    """

    global_features: list = field(default_factory=list)
    object_features: torch.Tensor | None = None
    stored_frame_indices: list = field(default_factory=list)
    capacity: int = 5

    def __post_init__(self):
        if self.capacity < 1:
            raise InvalidInputError("capacity must be positive")
        if len(self.global_features) > self.capacity:
            raise InvalidInputError("memory holds more frames than its capacity")
        if len(self.global_features) != len(self.stored_frame_indices):
            raise InvalidInputError("one frame index per stored global feature")
        if self.object_features is not None:
            if tuple(self.object_features.shape[-2:]) != (OBJECT_GRID, OBJECT_GRID):
                raise InvalidInputError("object features must be on the 30x30 grid")

    @property
    def num_objects(self) -> int:
        if self.object_features is None:
            return 0
        return self.object_features.shape[-4]

    def __len__(self):
        return len(self.global_features)


def id_mask_to_onehot(mask: IdMask, object_ids: Sequence[int] | None = None) -> np.ndarray:
    """One-hot [K, H, W] float32 view; channel 0 is background."""
    ids = tuple(mask.object_ids if object_ids is None else object_ids)
    labels = mask.labels
    known = set(ids) | {0}
    for v in np.unique(labels):
        if int(v) not in known:
            raise InvalidInputError(f"label {int(v)} not in object_ids {ids}")
    out = np.zeros((len(ids) + 1,) + labels.shape, dtype=np.float32)
    out[0] = labels == 0
    for k, oid in enumerate(ids, start=1):
        out[k] = labels == oid
    return out


def onehot_to_id_mask(probs: ProbMask) -> IdMask:
    """Per-pixel argmax; ties go to the lowest channel (background first)."""
    p = _as_numpy(probs.probs)
    idx = np.argmax(p, axis=0)  # first maximal index wins
    lut = np.array((0,) + tuple(probs.object_ids), dtype=np.int64)
    return IdMask(lut[idx], probs.object_ids)
