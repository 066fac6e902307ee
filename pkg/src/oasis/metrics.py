"""DAVIS-style evaluation: region similarity J, contour accuracy F, J&F, G and FPS."""

from __future__ import annotations

import math
import os
import platform
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .types import IdMask, InvalidInputError

_CROSS = ndimage.generate_binary_structure(2, 1)


def _binary(mask, object_id: int) -> np.ndarray:
    labels = mask.labels if isinstance(mask, IdMask) else np.asarray(mask)
    return labels == object_id


def _check(pred, gt):
    ps = pred.shape if not isinstance(pred, IdMask) else pred.labels.shape
    gs = gt.shape if not isinstance(gt, IdMask) else gt.labels.shape
    if tuple(ps) != tuple(gs):
        raise InvalidInputError(f"prediction {tuple(ps)} and ground truth {tuple(gs)} differ in shape")


def jaccard(pred, gt, object_id: int) -> float:
    """100 * IoU of one object; 100 if absent from both."""
    _check(pred, gt)
    p, g = _binary(pred, object_id), _binary(gt, object_id)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 100.0
    return 100.0 * np.logical_and(p, g).sum() / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """One-pixel inner boundary; pixels outside the image count as background."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def tolerance_radius(shape, tolerance_frac: float = 0.008) -> int:
    return int(math.ceil(tolerance_frac * math.hypot(*shape)))


def boundary_f(pred, gt, object_id: int, tolerance_frac: float = 0.008) -> float:
    """100 * boundary F-measure with matching radius ceil(frac * diagonal)."""
    _check(pred, gt)
    p, g = _binary(pred, object_id), _binary(gt, object_id)
    pb, gb = boundary(p), boundary(g)
    np_, ng = pb.sum(), gb.sum()
    if np_ == 0 and ng == 0:
        return 100.0
    if np_ == 0 or ng == 0:
        return 0.0
    se = disk(tolerance_radius(p.shape, tolerance_frac))
    g_dil = ndimage.binary_dilation(gb, structure=se)
    p_dil = ndimage.binary_dilation(pb, structure=se)
    precision = (pb & g_dil).sum() / np_
    recall = (gb & p_dil).sum() / ng
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2 * precision * recall / (precision + recall)


@dataclass
class SequenceResult:
    per_object_J: list
    per_object_F: list
    JF: float
    frames_evaluated: int
    object_ids: tuple = ()

    def __post_init__(self):
        expect = (float(np.mean(self.per_object_J)) + float(np.mean(self.per_object_F))) / 2
        if abs(expect - self.JF) > 1e-9:
            raise InvalidInputError("JF must equal the mean of mean J and mean F")

    @property
    def J(self) -> float:
        return float(np.mean(self.per_object_J))

    @property
    def F(self) -> float:
        return float(np.mean(self.per_object_F))


def evaluate_sequence(preds: list, gts: list, skip_first_last: bool = True,
                      tolerance_frac: float = 0.008, object_ids=None) -> SequenceResult:
    """Average per-object J and F over the evaluated frames.

    With ``skip_first_last`` (and at least three frames) the given first
    frame and the last frame are excluded. Objects default to those in the
    first ground-truth frame.
    """
    if len(preds) != len(gts):
        raise InvalidInputError(f"{len(preds)} predictions for {len(gts)} ground-truth frames")
    if not gts:
        raise InvalidInputError("empty sequence")
    if object_ids is None:
        object_ids = gts[0].object_ids if isinstance(gts[0], IdMask) else \
            tuple(int(v) for v in np.unique(gts[0]) if v)
    if not object_ids:
        raise InvalidInputError("no objects to evaluate")
    frames = range(1, len(gts) - 1) if skip_first_last and len(gts) >= 3 else range(len(gts))
    Js, Fs = [], []
    for oid in object_ids:
        Js.append(float(np.mean([jaccard(preds[t], gts[t], oid) for t in frames])))
        Fs.append(float(np.mean([boundary_f(preds[t], gts[t], oid, tolerance_frac) for t in frames])))
    jf = (float(np.mean(Js)) + float(np.mean(Fs))) / 2
    return SequenceResult(Js, Fs, jf, len(frames), tuple(object_ids))


def summarize(results: dict, split: dict | None = None) -> dict:
    """Dataset summary with the benchmark's column names.

    ``G`` is the mean J&F over sequences unless ``split`` maps sequence
    names to "seen"/"unseen", in which case the YouTubeVOS-style
    J_s, F_s, J_u, F_u are reported and G is their mean.
    """
    if not results:
        raise InvalidInputError("no sequences to summarize")
    seqs = list(results.values())
    out = {
        "JF": float(np.mean([r.JF for r in seqs])),
        "J": float(np.mean([r.J for r in seqs])),
        "F": float(np.mean([r.F for r in seqs])),
    }
    if split:
        parts = {}
        for tag, suffix in (("seen", "s"), ("unseen", "u")):
            sel = [results[n] for n in results if split.get(n) == tag]
            j = [v for r in sel for v in r.per_object_J]
            f = [v for r in sel for v in r.per_object_F]
            parts[f"J_{suffix}"] = float(np.mean(j)) if j else float("nan")
            parts[f"F_{suffix}"] = float(np.mean(f)) if f else float("nan")
        out.update(parts)
        out["G"] = float(np.nanmean(list(parts.values())))
    else:
        out["G"] = out["JF"]
    return out


@dataclass
class FPSReport:
    fps: float
    timed_frames: int
    seconds: float
    hardware: dict = field(default_factory=dict)


def hardware_descriptor() -> dict:
    return {
        "machine": platform.machine(),
        "processor": platform.processor() or platform.machine(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "torch_threads": torch.get_num_threads(),
        "cpu_count": os.cpu_count(),
        "cuda": torch.cuda.get_device_name(0) if torch.cuda.is_available() else None,
    }


def fps_benchmark(model, video: list, warmup_frames: int, timed_frames: int) -> FPSReport:
    """Single-stream frames per second over ``timed_frames`` after warmup.

    ``model`` exposes ``step(frame)`` (memory updates happen inside it) or
    is a plain callable taking one frame.
    """
    if timed_frames <= 0:
        raise InvalidInputError("timed_frames must be positive")
    if warmup_frames < 0:
        raise InvalidInputError("warmup_frames must be nonnegative")
    if len(video) < warmup_frames + timed_frames:
        raise InvalidInputError(f"video has {len(video)} frames, need {warmup_frames + timed_frames}")
    step = model.step if hasattr(model, "step") else model
    for frame in video[:warmup_frames]:
        step(frame)
    start = time.perf_counter()
    for frame in video[warmup_frames:warmup_frames + timed_frames]:
        step(frame)
    elapsed = time.perf_counter() - start
    return FPSReport(timed_frames / elapsed, timed_frames, elapsed, hardware_descriptor())
