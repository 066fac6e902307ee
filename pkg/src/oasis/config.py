"""Run configuration: presets, a key-value (INI) file format, and overrides.

A config file has one section per top-level group; nested model options use
dotted keys::

    [train]
    total_iters = 500
    lr_decay_points = 0.8, 0.92

    [model]
    use_structure_decoder = true
    structure.use_object_fusion = false
    fusion.beta = 2.0
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

from .engine import TrainConfig
from .losses import LossConfig
from .model import ModelConfig
from .synthetic import SyntheticSceneConfig
from .types import InvalidInputError

logger = logging.getLogger(__name__)

SEED_ENV = "OASIS_SEED"


@dataclass
class DataConfig:
    root: str = ""  # empty: generate synthetic data under --out
    n_train: int = 8
    n_val: int = 5
    n_pretrain_images: int = 32


@dataclass
class EvalConfig:
    skip_first_last: bool = True
    tolerance_frac: float = 0.008
    warmup_frames: int = 5
    timed_frames: int = 20


@dataclass
class RunConfig:
    preset: str = "desk"
    seed: int = 0
    device: str = "cpu"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(
        total_iters=300, backbone_lr_scale=1.0, lr_decay_points=[], seq_len=3))
    loss: LossConfig = field(default_factory=LossConfig)
    synthetic: SyntheticSceneConfig = field(default_factory=SyntheticSceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def preset(name: str) -> RunConfig:
    if name == "desk":
        return RunConfig()
    if name == "paper":
        return RunConfig(
            preset="paper", model=ModelConfig.paper(), train=TrainConfig.paper(),
            pretrain=TrainConfig(total_iters=80000, backbone_lr_scale=1.0, lr_decay_points=[],
                                 seq_len=3, crop=384, batch=16),
            synthetic=SyntheticSceneConfig(canvas=480, min_radius=40, max_radius=90, max_speed=12,
                                           n_frames=16),
        )
    raise InvalidInputError(f"unknown preset {name!r}; choose desk or paper")


# ---------------------------------------------------------------------------
# flattening and value parsing

_SECTIONS = ("run", "model", "train", "pretrain", "loss", "synthetic", "data", "eval")
_RUN_KEYS = ("preset", "seed", "device")


def _flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(v):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def flatten(cfg: RunConfig) -> dict:
    """{(section, dotted key): value} for every leaf option."""
    out = {("run", k): getattr(cfg, k) for k in _RUN_KEYS}
    for sec in _SECTIONS[1:]:
        for k, v in _flatten(getattr(cfg, sec)).items():
            out[(sec, k)] = v
    return out


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    return str(v)


def _parse_scalar(text: str, like):
    t = text.strip()
    if t.lower() == "none":
        return None
    if isinstance(like, bool):
        if t.lower() in ("true", "yes", "on", "1"):
            return True
        if t.lower() in ("false", "no", "off", "0"):
            return False
        raise ValueError(f"not a boolean: {t!r}")
    if isinstance(like, int):
        return int(t)
    if isinstance(like, float):
        return float(t)
    if like is None:
        for conv in (int, float):
            try:
                return conv(t)
            except ValueError:
                pass
    return t


def parse_value(text: str, like):
    """Parse ``text`` using the type of the current value ``like``."""
    if isinstance(like, (list, tuple)):
        if not text.strip():
            return []
        elem = like[0] if like else 0.0
        # numeric lists accept ints where floats are expected and vice versa
        vals = [_parse_scalar(p, elem) for p in text.split(",")]
        return type(like)(vals) if isinstance(like, tuple) else vals
    if like is None and "," in text:
        return [_parse_scalar(p, None) for p in text.split(",")]
    return _parse_scalar(text, like)


def _rebuild(template, values: dict, prefix: str = ""):
    """Construct a dataclass like ``template`` with leaf values from ``values``."""
    kwargs = {}
    for f in dataclasses.fields(template):
        cur = getattr(template, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(cur):
            kwargs[f.name] = _rebuild(cur, values, key + ".")
        else:
            kwargs[f.name] = values.get(key, cur)
    return type(template)(**kwargs)


def with_options(cfg: RunConfig, options: dict) -> RunConfig:
    """Copy of ``cfg`` with {(section, dotted key): value} replaced; validation reruns."""
    known = flatten(cfg)
    for sec, key in options:
        if (sec, key) not in known:
            raise InvalidInputError(f"unknown option [{sec}] {key}")
    run = {k: options.get(("run", k), getattr(cfg, k)) for k in _RUN_KEYS}
    parts = {}
    for sec in _SECTIONS[1:]:
        vals = {k: v for (s, k), v in options.items() if s == sec}
        try:
            parts[sec] = _rebuild(getattr(cfg, sec), vals)
        except (TypeError, ValueError) as e:
            raise InvalidInputError(f"bad value in [{sec}]: {e}") from None
    return RunConfig(**run, **parts)


# ---------------------------------------------------------------------------
# files


def read_config_file(path: Path) -> dict:
    """Raw {(section, key): text} pairs from an INI file."""
    path = Path(path)
    if not path.is_file():
        raise InvalidInputError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read(path)
    except configparser.Error as e:
        raise InvalidInputError(f"cannot parse config {path}: {e}") from None
    return {(sec, k): v for sec in parser.sections() for k, v in parser[sec].items()}


def write_config(cfg: RunConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    by_section: dict = {}
    for (sec, k), v in flatten(cfg).items():
        by_section.setdefault(sec, []).append(f"{k} = {_format(v)}")
    text = "\n\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in by_section.items())
    path.write_text(text + "\n")
    return path


def apply_pairs(cfg: RunConfig, pairs: dict, warn_against: RunConfig | None = None) -> RunConfig:
    """Apply parsed file options; warn where they override an explicit preset."""
    current = flatten(cfg)
    reference = flatten(warn_against) if warn_against is not None else None
    values = {}
    for (sec, key), text in pairs.items():
        if (sec, key) not in current:
            raise InvalidInputError(f"unknown option [{sec}] {key}")
        try:
            values[(sec, key)] = parse_value(text, current[(sec, key)])
        except ValueError as e:
            raise InvalidInputError(f"bad value for [{sec}] {key}: {e}") from None
        if reference is not None and reference[(sec, key)] != values[(sec, key)]:
            logger.warning("config file overrides preset %r: [%s] %s = %s",
                           warn_against.preset, sec, key, text.strip())
    return with_options(cfg, values)


def load_config(path: Path | None = None, preset_name: str | None = None,
                seed: int | None = None, device: str | None = None,
                environ: dict | None = None) -> RunConfig:
    """Resolve the run configuration.

    Precedence, lowest first: preset (default desk), config file,
    ``OASIS_SEED`` for the seed, explicit ``seed``/``device`` arguments.
    When both a preset and a file are given, file values win and each
    conflicting key is logged as a warning.
    """
    environ = os.environ if environ is None else environ
    pairs = read_config_file(path) if path is not None else {}
    base_name = preset_name
    if base_name is None:
        base_name = pairs.get(("run", "preset"), "desk").strip()
    cfg = preset(base_name)
    cfg = apply_pairs(cfg, {k: v for k, v in pairs.items() if k != ("run", "preset")},
                      warn_against=cfg if preset_name is not None else None)
    if SEED_ENV in environ:
        try:
            cfg = dataclasses.replace(cfg, seed=int(environ[SEED_ENV]))
        except ValueError:
            raise InvalidInputError(f"{SEED_ENV} must be an integer") from None
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if device is not None:
        cfg = dataclasses.replace(cfg, device=device)
    return cfg
