"""Synthetic moving-shape videos with scheduled occlusions."""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .types import InvalidInputError

LUMA = np.array([0.299, 0.587, 0.114])

SHAPES = ("square", "disk", "triangle")
TEXTURES = ("flat", "noise", "gradient")


@dataclass
class SyntheticSceneConfig:
    canvas: int = 64
    n_objects: int = 2
    shapes: tuple = SHAPES
    texture: str = "flat"
    n_frames: int = 8
    min_radius: float = 7.0
    max_radius: float = 12.0
    max_speed: float = 3.0
    velocities: list | None = None  # per-object (vx, vy) in pixels/frame; random if None
    depth_order: list | None = None  # back-to-front object ids; random if None

    def __post_init__(self):
        if not 1 <= self.n_objects <= 3:
            raise InvalidInputError("n_objects must be between 1 and 3")
        if self.texture not in TEXTURES:
            raise InvalidInputError(f"texture must be one of {TEXTURES}")
        bad = set(self.shapes) - set(SHAPES)
        if bad or not self.shapes:
            raise InvalidInputError(f"unknown shapes {sorted(bad)}")
        if self.canvas % 16 or self.canvas < 16:
            raise InvalidInputError("canvas must be a positive multiple of 16")
        if 2 * self.max_radius + 2 > self.canvas or self.min_radius > self.max_radius:
            raise InvalidInputError("objects do not fit the canvas")
        if self.n_frames < 1:
            raise InvalidInputError("n_frames must be positive")
        if self.velocities is not None and len(self.velocities) != self.n_objects:
            raise InvalidInputError("one velocity per object")
        if self.depth_order is not None and sorted(self.depth_order) != list(range(1, self.n_objects + 1)):
            raise InvalidInputError("depth_order must permute the object ids")


@dataclass
class MovingObject:
    shape: str
    radius: float
    color: np.ndarray
    start: np.ndarray  # (x, y) centre at frame 0
    velocity: np.ndarray  # (vx, vy)
    texture_seed: int = 0

    def centre(self, t: int) -> np.ndarray:
        return self.start + self.velocity * t


@dataclass
class Scene:
    objects: list
    depth_order: list  # back-to-front object ids (1-based)
    background: np.ndarray  # [3, H, W]
    texture: str = "flat"
    crossing_frame: int | None = None
    extra: dict = field(default_factory=dict)


def rasterize(shape: str, centre, radius: float, size: int) -> np.ndarray:
    """Boolean coverage of a shape, sampled at pixel centres."""
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = centre
    dx, dy = xs - cx, ys - cy
    if shape == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if shape == "disk":
        return dx * dx + dy * dy <= radius * radius
    if shape == "triangle":
        # apex up, base at cy + r, base half-width r
        return (dy <= radius) & (2 * np.abs(dx) <= dy + radius)
    raise InvalidInputError(f"unknown shape {shape}")


def _object_texture(obj: MovingObject, texture: str, t: int, size: int) -> np.ndarray:
    base = np.broadcast_to(obj.color[:, None, None], (3, size, size)).astype(np.float64)
    if texture == "flat":
        return base
    cx, cy = obj.centre(t)
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    if texture == "gradient":
        ramp = np.clip((xs - cx) / (2 * obj.radius), -0.5, 0.5) * 0.4
        return np.clip(base + ramp[None], 0, 1)
    # noise moves with the object: sample a fixed pattern in object coordinates
    pat = np.random.default_rng(obj.texture_seed).uniform(-0.12, 0.12, size=(3, 64, 64))
    u = np.clip(np.floor(xs - cx + 32).astype(int), 0, 63)
    v = np.clip(np.floor(ys - cy + 32).astype(int), 0, 63)
    return np.clip(base + pat[:, v, u], 0, 1)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / size
    a, b = rng.uniform(-0.08, 0.08, size=2)
    base = rng.uniform(0.03, 0.15)
    tint = rng.uniform(-0.05, 0.05, size=3)
    bg = base + a * xs + b * ys
    bg = bg[None] + tint[:, None, None]
    bg = bg + rng.normal(0, 0.01, size=(3, size, size))
    return np.clip(bg, 0, 1)


def _colors(rng: np.random.Generator, n: int) -> list:
    """Distinct hues with luminances spread over [0.5, 0.95].

    Against the dark background this keeps object contours above the
    strong Canny threshold.
    """
    hue0 = rng.uniform()
    targets = rng.permutation(np.linspace(0.5, 0.95, n) if n > 1 else np.array([0.8]))
    out = []
    for k in range(n):
        h = (hue0 + k / n + rng.uniform(-0.05, 0.05)) % 1.0
        c = np.array(colorsys.hsv_to_rgb(h, rng.uniform(0.4, 0.7), 1.0))
        lum = float(c @ LUMA)
        # scale towards the target luminance, then lift towards white if still short
        c = np.clip(c * targets[k] / lum, 0, 1)
        short = targets[k] - float(c @ LUMA)
        if short > 0:
            c = c + (1 - c) * short / max(1e-6, float((1 - c) @ LUMA))
        out.append(np.clip(c, 0, 1))
    return out


def make_scene(cfg: SyntheticSceneConfig, rng: np.random.Generator, max_tries: int = 200) -> Scene:
    """Sample object shapes and linear paths that meet near the middle frame."""
    size = cfg.canvas
    T = cfg.n_frames
    for _ in range(max_tries):
        colors = _colors(rng, cfg.n_objects)
        tc = (T - 1) / 2.0
        meet = rng.uniform(size * 0.4, size * 0.6, size=2)
        objs = []
        ok = True
        for k in range(cfg.n_objects):
            r = rng.uniform(cfg.min_radius, cfg.max_radius)
            shape = str(rng.choice(list(cfg.shapes)))
            lo, hi = r + 1, size - r - 1
            if cfg.velocities is not None:
                v = np.asarray(cfg.velocities[k], dtype=np.float64)
            else:
                ang = rng.uniform(0, 2 * np.pi)
                v = rng.uniform(0.5, 1.0) * cfg.max_speed * np.array([np.cos(ang), np.sin(ang)])
            # spread objects around the meeting point so they overlap but are not identical
            centre_tc = meet + rng.uniform(-r / 2, r / 2, size=2) if cfg.n_objects > 1 else meet
            start = centre_tc - v * tc
            end = start + v * (T - 1)
            if np.any(start < lo) or np.any(start > hi) or np.any(end < lo) or np.any(end > hi):
                ok = False
                break
            objs.append(MovingObject(shape, r, colors[k], start, v, int(rng.integers(1 << 30))))
        if not ok:
            continue
        order = list(cfg.depth_order) if cfg.depth_order is not None else \
            [int(i) + 1 for i in rng.permutation(cfg.n_objects)]
        scene = Scene(objs, order, _background(rng, size), cfg.texture,
                      crossing_frame=int(round(tc)) if cfg.n_objects > 1 else None)
        if _first_frame_visible(scene, size):
            return scene
    raise InvalidInputError("could not place objects on the canvas; reduce radius or speed")


def _first_frame_visible(scene: Scene, size: int, min_frac: float = 0.6) -> bool:
    _, labels = render_frame(scene, 0, size)
    for oid, obj in enumerate(scene.objects, start=1):
        full = rasterize(obj.shape, obj.centre(0), obj.radius, size).sum()
        if full == 0 or (labels == oid).sum() < min_frac * full:
            return False
    return True


def render_frame(scene: Scene, t: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Painter's-order render of frame t: (pixels [3, H, W] in [0, 1], labels [H, W])."""
    img = scene.background.copy()
    labels = np.zeros((size, size), dtype=np.int64)
    for oid in scene.depth_order:
        obj = scene.objects[oid - 1]
        cov = rasterize(obj.shape, obj.centre(t), obj.radius, size)
        tex = _object_texture(obj, scene.texture, t, size)
        img = np.where(cov[None], tex, img)
        labels[cov] = oid
    return img, labels


def quantize(pixels: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so frames survive a PNG round trip exactly."""
    return (np.round(np.clip(pixels, 0, 1) * 255) / 255).astype(np.float32)


def render_sequence(cfg: SyntheticSceneConfig, rng: np.random.Generator,
                    scene: Scene | None = None) -> tuple[np.ndarray, np.ndarray, Scene]:
    """Frames [T, 3, H, W] float32 (8-bit quantized) and labels [T, H, W]."""
    scene = scene or make_scene(cfg, rng)
    frames, masks = [], []
    for t in range(cfg.n_frames):
        img, lab = render_frame(scene, t, cfg.canvas)
        frames.append(quantize(img))
        masks.append(lab)
    return np.stack(frames), np.stack(masks), scene


def has_occlusion(labels: np.ndarray, scene: Scene, size: int) -> bool:
    """True if some frame shows an object partly hidden by another."""
    for t in range(labels.shape[0]):
        for oid, obj in enumerate(scene.objects, start=1):
            cov = rasterize(obj.shape, obj.centre(t), obj.radius, size)
            hidden = cov & (labels[t] != oid)
            if hidden.any():
                return True
    return False
