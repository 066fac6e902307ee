"""On-disk formats: DAVIS-style dataset layout, indexed-palette PNG masks,
and versioned checkpoints."""

from __future__ import annotations

import io as _io
import pickle
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .types import FrameTensor, IdMask, InvalidInputError

CHECKPOINT_FORMAT = "oasis-checkpoint"
CHECKPOINT_VERSION = 1
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class DatasetError(InvalidInputError):
    """A dataset file is missing or unreadable."""

    def __init__(self, message: str, path: Path | str | None = None, sequence: str | None = None):
        self.path = str(path) if path is not None else None
        self.sequence = sequence
        where = []
        if sequence is not None:
            where.append(f"sequence {sequence!r}")
        if path is not None:
            where.append(f"file {str(path)!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


def davis_palette() -> list:
    """The standard 256-entry VOC/DAVIS colour table, flattened RGB."""
    pal = []
    for i in range(256):
        r = g = b = 0
        c = i
        for j in range(8):
            r |= ((c >> 0) & 1) << (7 - j)
            g |= ((c >> 1) & 1) << (7 - j)
            b |= ((c >> 2) & 1) << (7 - j)
            c >>= 3
        pal += [r, g, b]
    return pal


def write_mask_png(path: Path, labels: np.ndarray, palette: list | None = None):
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 255:
        raise InvalidInputError("palette PNGs hold labels 0..255 only")
    img = Image.fromarray(labels.astype(np.uint8), mode="P")
    img.putpalette(palette or davis_palette())
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG", optimize=False)


def read_mask_png(path: Path, sequence: str | None = None) -> tuple[np.ndarray, list | None]:
    """Palette indices [H, W] and the file's palette."""
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode != "P":
                raise DatasetError(f"annotation is mode {img.mode!r}, expected an indexed palette",
                                   path, sequence)
            return np.array(img, dtype=np.int64), img.getpalette()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode annotation: {exc}", path, sequence) from exc


def write_frame_png(path: Path, pixels: np.ndarray):
    arr = np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def read_frame(path: Path, sequence: str | None = None) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.array(img.convert("RGB"), dtype=np.float32)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"cannot decode frame: {exc}", path, sequence) from exc
    return arr.transpose(2, 0, 1) / 255.0


@dataclass
class DatasetLayout:
    """``root/JPEGImages/<seq>/<frame>.{jpg,png}`` and ``root/Annotations/<seq>/<frame>.png``."""

    root: Path
    split_file: Path | None = None

    def __post_init__(self):
        self.root = Path(self.root)
        if self.split_file is not None:
            self.split_file = Path(self.split_file)

    @property
    def images_dir(self) -> Path:
        return self.root / "JPEGImages"

    @property
    def annotations_dir(self) -> Path:
        return self.root / "Annotations"

    def sequences(self) -> list:
        if self.split_file is not None:
            names = [l.strip() for l in self.split_file.read_text().splitlines()]
            return [n for n in names if n]
        if not self.images_dir.is_dir():
            return []
        return sorted(p.name for p in self.images_dir.iterdir() if p.is_dir())

    def frame_paths(self, name: str) -> list:
        d = self.images_dir / name
        if not d.is_dir():
            raise DatasetError("sequence not found", d, name)
        return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


@dataclass
class Sequence:
    name: str
    frames: list  # FrameTensor
    masks: list  # IdMask or None per frame
    palette: list | None = None
    frame_names: list | None = None


def _check_palette(labels: np.ndarray, palette: list | None, path: Path, name: str):
    """Reject files where two used indices share a colour (object identity would be ambiguous)."""
    if palette is None:
        return
    seen = {}
    for idx in np.unique(labels):
        rgb = tuple(palette[3 * idx:3 * idx + 3])
        if len(rgb) == 3 and rgb in seen:
            raise DatasetError(f"palette index collision: indices {seen[rgb]} and {idx} "
                               f"share colour {rgb}", path, name)
        seen[rgb] = int(idx)


def load_sequence(layout: DatasetLayout, name: str) -> Sequence:
    """Frames in [0, 1] plus masks where annotated (frame 0 is required)."""
    paths = layout.frame_paths(name)
    if not paths:
        raise DatasetError("sequence has no frames", layout.images_dir / name, name)
    frames, masks, names = [], [], []
    palette = None
    shape = None
    for i, p in enumerate(paths):
        px = read_frame(p, name)
        if shape is None:
            shape = px.shape
        elif px.shape != shape:
            raise DatasetError(f"frame size {px.shape[1:]} differs from {shape[1:]}", p, name)
        try:
            frames.append(FrameTensor(px, i, name))
        except InvalidInputError as exc:
            raise DatasetError(str(exc), p, name) from exc
        ann = layout.annotations_dir / name / (p.stem + ".png")
        if ann.exists():
            labels, pal = read_mask_png(ann, name)
            if labels.shape != px.shape[1:]:
                raise DatasetError(f"annotation size {labels.shape} differs from frame", ann, name)
            _check_palette(labels, pal, ann, name)
            if palette is None:
                palette = pal
            elif pal is not None and pal[:len(palette)] != palette[:len(pal)]:
                raise DatasetError("annotation palette differs from the sequence palette", ann, name)
            masks.append(IdMask(labels))
        elif i == 0:
            raise DatasetError("missing first-frame annotation", ann, name)
        else:
            masks.append(None)
        names.append(p.stem)
    return Sequence(name, frames, masks, palette, names)


def load_annotations(layout: DatasetLayout, name: str) -> dict:
    """{frame name: labels} for every PNG under ``Annotations/<name>/``."""
    d = layout.annotations_dir / name
    if not d.is_dir():
        raise DatasetError("no annotations for sequence", d, name)
    return {p.stem: read_mask_png(p, name)[0] for p in sorted(d.glob("*.png"))}


def save_predictions(masks: list, layout: DatasetLayout, name: str,
                     palette: list | None = None, frame_names: list | None = None) -> list:
    """Write one palette PNG per frame under ``Annotations/<name>/``."""
    out = []
    for i, m in enumerate(masks):
        fname = (frame_names[i] if frame_names else f"{i:05d}") + ".png"
        path = layout.annotations_dir / name / fname
        labels = m.labels if isinstance(m, IdMask) else np.asarray(m)
        write_mask_png(path, labels, palette)
        out.append(path)
    return out


def zip_predictions(layout: DatasetLayout, zip_path: Path) -> Path:
    """Pack ``Annotations/`` into a zip in the evaluation-server layout."""
    zip_path = Path(zip_path)
    with zipfile.ZipFile(zip_path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for p in sorted(layout.annotations_dir.rglob("*.png")):
            info = zipfile.ZipInfo(str(p.relative_to(layout.root)), date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, p.read_bytes())
    return zip_path


def save_checkpoint(path: Path, model, extra: dict | None = None) -> Path:
    """Single-file archive: weights plus config snapshot."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    buf = _io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: Path):
    """Rebuild the model stored by :func:`save_checkpoint`."""
    from .model import OASIS, ModelConfig

    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise InvalidInputError(f"{path} is not an OASIS checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {payload.get('version')}")
    model = OASIS(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
