"""Inference propagation, training loops and synthetic dataset generation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
import torch
from scipy import ndimage

from . import io as oio
from .edges import canny, canny_gray, structure_labels, to_gray255
from .encoders import memory_update, should_store
from .losses import LossConfig, total_mask_loss, uncertain_point_indices
from .model import OASIS
from .structure import structure_bce
from .synthetic import SyntheticSceneConfig, has_occlusion, make_scene, render_sequence
from .types import (FrameTensor, IdMask, InvalidInputError, MemoryState, ProbMask, StructureKind,
                    StructureMap, id_mask_to_onehot, onehot_to_id_mask)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainConfig:
    total_iters: int = 2000
    base_lr: float = 1e-4
    backbone_lr_scale: float = 0.1
    lr_decay_points: list = field(default_factory=lambda: [0.8, 0.92])
    lr_decay_factor: float = 0.1
    grad_clip_norm: float = 3.0
    seq_len: int = 4
    crop: int = 64
    batch: int = 2
    seed: int = 0
    weight_decay: float = 1e-4
    memory_interval: int = 1
    augment: bool = False

    def __post_init__(self):
        pts = list(self.lr_decay_points)
        if any(not 0 < p < 1 for p in pts) or any(b <= a for a, b in zip(pts, pts[1:])):
            raise InvalidInputError("lr_decay_points must be strictly increasing in (0, 1)")
        self.lr_decay_points = pts
        for name in ("total_iters", "base_lr", "lr_decay_factor", "grad_clip_norm", "seq_len",
                     "crop", "batch", "memory_interval"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.backbone_lr_scale < 0 or self.weight_decay < 0:
            raise InvalidInputError("backbone_lr_scale and weight_decay must be nonnegative")
        if self.crop % 16:
            raise InvalidInputError("crop must be divisible by 16")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        # small from-scratch models on one CPU converge faster with a higher, uniform rate
        base = dict(base_lr=5e-4, backbone_lr_scale=1.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(total_iters=125000, seq_len=8, crop=480, batch=16)
        base.update(kw)
        return cls(**base)


def learning_rate(iteration: int, cfg: TrainConfig) -> float:
    """Step schedule: base_lr times decay_factor per decay point already reached."""
    passed = sum(iteration >= p * cfg.total_iters for p in cfg.lr_decay_points)
    return cfg.base_lr * cfg.lr_decay_factor ** passed


# ---------------------------------------------------------------------------
# inference


class StepResult(NamedTuple):
    mask: IdMask
    probs: ProbMask
    structure: StructureMap | None


class InferenceSession:
    """Online segmentation of one video; owns that video's memory."""

    def __init__(self, model: OASIS, capacity: int | None = None, update_interval: int | None = None):
        self.model = model
        mcfg = model.cfg.memory
        self.capacity = capacity or mcfg.capacity
        self.update_interval = update_interval or mcfg.update_interval
        self.state: MemoryState | None = None
        self.object_ids: tuple = ()
        self.size: tuple | None = None

    def reset(self):
        self.state = None

    @torch.no_grad()
    def start(self, frame: FrameTensor, mask: IdMask) -> StepResult:
        if mask.shape != (frame.height, frame.width):
            raise InvalidInputError(f"mask {mask.shape} does not match frame "
                                    f"{(frame.height, frame.width)}")
        if not mask.object_ids:
            raise InvalidInputError("first-frame mask has no objects")
        self.model.eval()
        self.object_ids = mask.object_ids
        self.size = mask.shape
        onehot = torch.from_numpy(id_mask_to_onehot(mask))
        g, objs = self.model.memorize(frame.to_tensor(), onehot.unsqueeze(0))
        self.state = memory_update(MemoryState(capacity=self.capacity), 0, g, objs,
                                   self.update_interval)
        return StepResult(mask, ProbMask(onehot, self.object_ids), None)

    @torch.no_grad()
    def step(self, frame: FrameTensor) -> StepResult:
        if self.state is None:
            raise InvalidInputError("call start() with the first annotated frame")
        if (frame.height, frame.width) != self.size:
            raise InvalidInputError("all frames must share one size")
        edges = torch.from_numpy(canny(frame, self.model.cfg.canny).values).unsqueeze(0)
        out = self.model.segment(frame.to_tensor(), edges, self.state.object_features)
        probs = ProbMask(out.probs[0], self.object_ids)
        mask = onehot_to_id_mask(probs)
        if should_store(frame.frame_index, self.update_interval):
            g, objs = self.model.memorize(frame.to_tensor(), out.probs)
            self.state = memory_update(self.state, frame.frame_index, g, objs, self.update_interval)
        structure = None
        if out.structure is not None:
            structure = StructureMap(out.structure[0], StructureKind.PREDICTED_LOGITS)
        return StepResult(mask, probs, structure)


def propagate_video(frames: list, first_mask: IdMask, model: OASIS,
                    return_structure: bool = False):
    """Segment every frame given the first frame's mask.

    Returns a list of IdMask (frame 0 is ``first_mask`` itself), plus a
    list of predicted structure maps (None for frame 0) when requested.
    """
    if not frames:
        raise InvalidInputError("empty frame list")
    session = InferenceSession(model)
    session.start(_reindexed(frames[0], 0), first_mask)
    masks, structures = [first_mask], [None]
    for t, frame in enumerate(frames[1:], start=1):
        res = session.step(_reindexed(frame, t))
        masks.append(res.mask)
        structures.append(res.structure)
    return (masks, structures) if return_structure else masks


def _reindexed(frame: FrameTensor, t: int) -> FrameTensor:
    if frame.frame_index == t:
        return frame
    return FrameTensor(frame.pixels, t, frame.source_id)


# ---------------------------------------------------------------------------
# training data


def frame_edges(pixels: np.ndarray, model_cfg) -> np.ndarray:
    return canny_gray(to_gray255(pixels), model_cfg.canny)[None].astype(np.float32)


@dataclass
class Clip:
    frames: np.ndarray  # [T, 3, H, W]
    labels: np.ndarray  # [T, H, W]


class SequenceDataset:
    """In-memory videos sampled as fixed-length clips."""

    def __init__(self, sequences: list):
        if not sequences:
            raise InvalidInputError("dataset is empty")
        self.sequences = [Clip(np.asarray(f, np.float32), np.asarray(l, np.int64)) for f, l in sequences]

    @classmethod
    def from_layout(cls, layout: oio.DatasetLayout, names: list | None = None) -> "SequenceDataset":
        seqs = []
        for name in names or layout.sequences():
            s = oio.load_sequence(layout, name)
            if any(m is None for m in s.masks):
                raise oio.DatasetError("training needs dense annotations", sequence=name)
            seqs.append((np.stack([f.pixels for f in s.frames]), np.stack([m.labels for m in s.masks])))
        return cls(seqs)

    def __len__(self):
        return len(self.sequences)

    def sample_clip(self, rng: np.random.Generator, seq_len: int, crop: int, augment: bool) -> Clip:
        clip = self.sequences[int(rng.integers(len(self.sequences)))]
        T = clip.frames.shape[0]
        if T < seq_len:
            raise InvalidInputError(f"sequence has {T} frames, need {seq_len}")
        s = int(rng.integers(T - seq_len + 1))
        frames, labels = clip.frames[s:s + seq_len], clip.labels[s:s + seq_len]
        if augment:
            if rng.random() < 0.5:
                frames, labels = frames[::-1], labels[::-1]
            if rng.random() < 0.5:
                frames, labels = frames[..., ::-1], labels[..., ::-1]
        return _crop(Clip(np.ascontiguousarray(frames), np.ascontiguousarray(labels)), crop, rng)


def _crop(clip: Clip, crop: int, rng: np.random.Generator) -> Clip:
    H, W = clip.labels.shape[-2:]
    if H < crop or W < crop:
        raise InvalidInputError(f"frames {H}x{W} smaller than crop {crop}")
    y = int(rng.integers(H - crop + 1))
    x = int(rng.integers(W - crop + 1))
    return Clip(clip.frames[..., y:y + crop, x:x + crop], clip.labels[..., y:y + crop, x:x + crop])


def collate(clips: list, model_cfg) -> dict:
    """Stack clips; object channels padded to the batch maximum.

    Object ids come from each clip's first frame; labels that appear only
    later are treated as background.
    """
    ids = [tuple(int(v) for v in np.unique(c.labels[0]) if v) for c in clips]
    n_obj = max(1, max(len(i) for i in ids))
    B = len(clips)
    T, _, H, W = clips[0].frames.shape
    onehot = np.zeros((B, T, n_obj + 1, H, W), np.float32)
    edges = np.zeros((B, T, 1, H, W), np.float32)
    structs = np.zeros((B, T, 1, H, W), np.float32)
    for b, (c, oid) in enumerate(zip(clips, ids)):
        lab = np.where(np.isin(c.labels, oid), c.labels, 0)
        onehot[b, :, 0] = lab == 0
        for k, o in enumerate(oid, start=1):
            onehot[b, :, k] = lab == o
        for t in range(T):
            edges[b, t] = frame_edges(c.frames[t], model_cfg)
            structs[b, t, 0] = structure_labels(lab[t], model_cfg.boundary_width)
    return {
        "images": torch.from_numpy(np.stack([c.frames for c in clips])),
        "edges": torch.from_numpy(edges),
        "structures": torch.from_numpy(structs),
        "onehot": torch.from_numpy(onehot),
    }


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    history: list
    checkpoint: Path | None = None
    log_path: Path | None = None


def sequence_loss(model: OASIS, batch: dict, iteration: int, loss_cfg: LossConfig,
                  n_points: int, total_iters: int, generator: torch.Generator,
                  memory_interval: int = 1, use_structure: bool = True):
    """Forward a batch of clips and return (loss, breakdown)."""
    images, edges = batch["images"], batch["edges"]
    onehot, structs = batch["onehot"], batch["structures"]
    B, T = images.shape[:2]
    g, objs = model.memorize(images[:, 0], onehot[:, 0])
    state = memory_update(MemoryState(capacity=model.cfg.memory.capacity), 0, g, objs, memory_interval)
    terms = {"ce": 0.0, "dice": 0.0, "edl": 0.0, "structure": 0.0}
    total = 0.0
    kl_w = 0.0
    for t in range(1, T):
        out = model.segment(images[:, t], edges[:, t], state.object_features, use_structure)
        K = out.probs.shape[1]
        idx = torch.stack([uncertain_point_indices(out.probs[b], n_points, generator) for b in range(B)])
        gather = lambda x: torch.gather(x.flatten(2), 2, idx[:, None].expand(B, K, -1))
        mask_loss, parts = total_mask_loss(gather(out.probs), gather(out.raw), gather(onehot[:, t]),
                                           iteration, loss_cfg, total_iters)
        loss_t = mask_loss
        if out.structure is not None:
            s_loss = structure_bce(out.structure, structs[:, t])
            loss_t = loss_t + s_loss
            terms["structure"] += s_loss.item() / (T - 1)
        total = total + loss_t / (T - 1)
        for k in ("ce", "dice", "edl"):
            terms[k] += parts[k] / (T - 1)
        kl_w = parts["kl_weight"]
        if t < T - 1 and should_store(t, memory_interval):
            g, objs = model.memorize(images[:, t], out.probs)
            state = memory_update(state, t, g, objs, memory_interval)
    terms["kl_weight"] = kl_w
    return total, terms


def _optimizer(model: OASIS, cfg: TrainConfig) -> torch.optim.Optimizer:
    backbone = {id(p) for p in model.backbone_parameters()}
    head = [p for p in model.parameters() if id(p) not in backbone]
    groups = [{"params": model.backbone_parameters(), "scale": cfg.backbone_lr_scale},
              {"params": head, "scale": 1.0}]
    return torch.optim.AdamW(groups, lr=cfg.base_lr, weight_decay=cfg.weight_decay)


def _run_training(model: OASIS, sampler: Callable, cfg: TrainConfig, loss_cfg: LossConfig,
                  n_points: int, use_structure: bool, out_dir: Path | None,
                  tag: str, on_step: Callable | None = None) -> TrainResult:
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = _optimizer(model, cfg)
    model.train()
    history = []
    log_f = None
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / f"{tag}_log.jsonl"
        log_f = open(log_path, "w")
    try:
        for it in range(cfg.total_iters):
            lr = learning_rate(it, cfg)
            for group in opt.param_groups:
                group["lr"] = lr * group["scale"]
            batch = sampler(rng)
            loss, terms = sequence_loss(model, batch, it, loss_cfg, n_points, cfg.total_iters, gen,
                                        cfg.memory_interval, use_structure)
            if not torch.isfinite(loss):
                dump = None
                if out_dir is not None:
                    dump = out_dir / f"{tag}_nan_batch_{it}.pt"
                    torch.save({"iteration": it, "batch": batch, "terms": terms}, dump)
                raise TrainingError(f"non-finite loss at iteration {it}: {terms}; batch dumped to {dump}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
            opt.step()
            rec = {"iteration": it, **terms, "total": loss.item(), "lr": lr,
                   "grad_norm": float(grad_norm)}
            history.append(rec)
            if log_f is not None:
                log_f.write(json.dumps(rec) + "\n")
            if on_step is not None:
                on_step(model, rec)
    finally:
        if log_f is not None:
            log_f.close()
    model.eval()
    ckpt = None
    if out_dir is not None:
        ckpt = oio.save_checkpoint(out_dir / f"{tag}.ckpt", model,
                                   {"train": asdict(cfg), "loss": asdict(loss_cfg)})
    return TrainResult(history, ckpt, log_path)


def train(dataset: SequenceDataset, model: OASIS, train_cfg: TrainConfig,
          loss_cfg: LossConfig | None = None, out_dir: Path | None = None,
          on_step: Callable | None = None) -> TrainResult:
    """Main training stage: CE + Dice + EDL on sampled points, plus structure BCE."""
    loss_cfg = loss_cfg or LossConfig()
    n_points = min(loss_cfg.num_points_main, train_cfg.crop * train_cfg.crop)

    def sampler(rng):
        clips = [dataset.sample_clip(rng, train_cfg.seq_len, train_cfg.crop, train_cfg.augment)
                 for _ in range(train_cfg.batch)]
        return collate(clips, model.cfg)

    return _run_training(model, sampler, train_cfg, loss_cfg, n_points, True, out_dir, "train", on_step)


# ---------------------------------------------------------------------------
# static pretraining on pseudo-videos

PSEUDO_VIDEO_FRAMES = 3


def random_affine(pixels: np.ndarray, labels: np.ndarray, rng: np.random.Generator,
                  max_rot: float = 15.0, max_scale: float = 0.1, max_shift: float = 0.08):
    """Warp an image (bilinear) and its labels (nearest) with one random affine map."""
    H, W = labels.shape
    ang = np.deg2rad(rng.uniform(-max_rot, max_rot))
    sc = 1 + rng.uniform(-max_scale, max_scale)
    shift = rng.uniform(-max_shift, max_shift, size=2) * np.array([H, W])
    rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]]) / sc
    centre = np.array([(H - 1) / 2, (W - 1) / 2])
    offset = centre - rot @ (centre + shift)
    img = np.stack([ndimage.affine_transform(pixels[c], rot, offset, order=1, mode="nearest")
                    for c in range(pixels.shape[0])])
    lab = ndimage.affine_transform(labels, rot, offset, order=0, mode="constant", cval=0)
    return img.astype(np.float32), lab.astype(np.int64)


def cut_and_paste(base: tuple, donor: tuple) -> tuple:
    """Paste the donor's objects over the base image, relabelled after the base ids."""
    px, lab = base[0].copy(), base[1].copy()
    dpx, dlab = donor
    offset = int(lab.max())
    fg = dlab > 0
    px[:, fg] = dpx[:, fg]
    lab[fg] = dlab[fg] + offset
    # compact ids to 1..n in order of first appearance value
    ids = [int(v) for v in np.unique(lab) if v]
    remap = np.zeros(int(lab.max()) + 1, np.int64)
    for new, old in enumerate(ids, start=1):
        remap[old] = new
    return px, remap[lab]


def pseudo_video(pairs: list, rng: np.random.Generator, max_objects: int = 3) -> Clip:
    """Three-frame clip from two composited stills under random affine + mirror."""
    a, b = rng.choice(len(pairs), size=2, replace=len(pairs) < 2)
    px, lab = cut_and_paste(pairs[int(a)], pairs[int(b)])
    lab = np.where(lab <= max_objects, lab, 0)
    if rng.random() < 0.5:
        px, lab = px[..., ::-1].copy(), lab[..., ::-1].copy()
    frames, labels = [], []
    for _ in range(PSEUDO_VIDEO_FRAMES):
        f, l = random_affine(px, lab, rng)
        frames.append(f)
        labels.append(l)
    return Clip(np.stack(frames), np.stack(labels))


def pretrain_static(image_mask_pairs: list, model: OASIS, train_cfg: TrainConfig,
                    loss_cfg: LossConfig | None = None, out_dir: Path | None = None) -> TrainResult:
    """Pseudo-video pretraining: CE + Dice only, no structure decoder, no EDL."""
    if not image_mask_pairs:
        raise InvalidInputError("no image/mask pairs to pretrain on")
    loss_cfg = LossConfig(**{**asdict(loss_cfg or LossConfig()), "lambda_edl": 0.0})
    n_points = min(loss_cfg.num_points_pretrain, train_cfg.crop * train_cfg.crop)
    pairs = [(np.asarray(p, np.float32), np.asarray(l, np.int64)) for p, l in image_mask_pairs]

    def sampler(rng):
        clips = []
        for _ in range(train_cfg.batch):
            clip = pseudo_video(pairs, rng)
            while not clip.labels[0].any():
                clip = pseudo_video(pairs, rng)
            clips.append(_crop(clip, train_cfg.crop, rng))
        return collate(clips, model.cfg)

    return _run_training(model, sampler, train_cfg, loss_cfg, n_points, False, out_dir, "pretrain")


# ---------------------------------------------------------------------------
# synthetic data on disk


def synthetic_sequences(cfg: SyntheticSceneConfig, n_sequences: int, seed: int) -> list:
    """In-memory (frames, labels) pairs; multi-object scenes always contain an occlusion."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n_sequences:
        scene = make_scene(cfg, rng)
        frames, labels, scene = render_sequence(cfg, rng, scene)
        if cfg.n_objects >= 2 and not has_occlusion(labels, scene, cfg.canvas):
            continue
        out.append((frames, labels))
    return out


def generate_synthetic(cfg: SyntheticSceneConfig, n_sequences: int, seed: int,
                       root: Path) -> oio.DatasetLayout:
    """Write a seed-deterministic synthetic dataset in the DAVIS layout."""
    layout = oio.DatasetLayout(Path(root))
    names = []
    for i, (frames, labels) in enumerate(synthetic_sequences(cfg, n_sequences, seed)):
        name = f"seq_{i:03d}"
        names.append(name)
        for t in range(frames.shape[0]):
            oio.write_frame_png(layout.images_dir / name / f"{t:05d}.png", frames[t])
            oio.write_mask_png(layout.annotations_dir / name / f"{t:05d}.png", labels[t])
    sets = layout.root / "ImageSets"
    sets.mkdir(parents=True, exist_ok=True)
    (sets / "all.txt").write_text("".join(n + "\n" for n in names))
    return layout


def moving_average(values: list, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
