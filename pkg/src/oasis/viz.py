"""PNG renderings: colour-mapped masks, structure maps, edge maps and side-by-side panels."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .io import davis_palette
from .types import EdgeMap, IdMask, InvalidInputError, StructureKind, StructureMap


def _rgb8(pixels: np.ndarray) -> np.ndarray:
    """[3, H, W] in [0, 1] -> [H, W, 3] uint8."""
    return np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def _gray_to_rgb(g: np.ndarray) -> np.ndarray:
    return np.repeat(g[..., None], 3, axis=-1)


def colorize_mask(mask: IdMask | np.ndarray, palette: list | None = None) -> np.ndarray:
    labels = mask.labels if isinstance(mask, IdMask) else np.asarray(mask)
    table = np.asarray(palette or davis_palette(), dtype=np.uint8).reshape(-1, 3)
    return table[np.clip(labels, 0, len(table) - 1)]


def overlay(pixels: np.ndarray, mask: IdMask | np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend mask colours over the frame on foreground pixels only."""
    labels = mask.labels if isinstance(mask, IdMask) else np.asarray(mask)
    base = _rgb8(pixels).astype(np.float64)
    col = colorize_mask(labels).astype(np.float64)
    fg = (labels > 0)[..., None]
    out = np.where(fg, (1 - alpha) * base + alpha * col, base)
    return np.round(out).astype(np.uint8)


def structure_image(structure: StructureMap | np.ndarray) -> np.ndarray:
    """8-bit grayscale: sigmoid of predicted logits, or the binary map scaled to 0/255."""
    if isinstance(structure, StructureMap):
        v = np.asarray(structure.values, dtype=np.float64)[0]
        if structure.kind is StructureKind.PREDICTED_LOGITS:
            v = 1 / (1 + np.exp(-v))
    else:
        v = np.asarray(structure, dtype=np.float64)
        v = v[0] if v.ndim == 3 else v
    return np.round(np.clip(v, 0, 1) * 255).astype(np.uint8)


def edge_image(edges: EdgeMap | np.ndarray) -> np.ndarray:
    v = edges.values if isinstance(edges, EdgeMap) else np.asarray(edges)
    v = v[0] if v.ndim == 3 else v
    return (np.asarray(v) > 0).astype(np.uint8) * 255


def panel(pixels: np.ndarray, mask=None, structure=None, edges=None, gap: int = 2) -> np.ndarray:
    """Frame, mask overlay, structure map and edge map side by side (missing ones skipped)."""
    tiles = [_rgb8(pixels)]
    if mask is not None:
        tiles.append(overlay(pixels, mask))
    if structure is not None:
        tiles.append(_gray_to_rgb(structure_image(structure)))
    if edges is not None:
        tiles.append(_gray_to_rgb(edge_image(edges)))
    H = tiles[0].shape[0]
    if any(t.shape[0] != H for t in tiles):
        raise InvalidInputError("panel tiles must share a height")
    spacer = np.full((H, gap, 3), 255, np.uint8)
    parts = []
    for i, t in enumerate(tiles):
        if i:
            parts.append(spacer)
        parts.append(t)
    return np.concatenate(parts, axis=1)


def save_image(path: Path, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "L" if array.ndim == 2 else "RGB"
    Image.fromarray(np.ascontiguousarray(array), mode=mode).save(path, format="PNG")
    return path
