"""Command-line entry point.

Every command prints one JSON summary line on stdout when it succeeds.
Exit status: 0 success, 1 input error (bad flags, files or config),
2 internal error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import io as oio
from . import viz
from .config import RunConfig, load_config, write_config
from .edges import canny, gt_structure_map
from .engine import (InferenceSession, SequenceDataset, generate_synthetic, pretrain_static,
                     propagate_video, synthetic_sequences, train)
from .metrics import evaluate_sequence, fps_benchmark, summarize
from .model import OASIS, build_model, count_parameters
from .types import FrameTensor, IdMask, InvalidInputError

logger = logging.getLogger("oasis")

COMMANDS = ("gen", "pretrain", "train", "infer", "eval", "bench", "viz", "sweep",
            "structmap", "edges")


class UsageError(InvalidInputError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key-value (INI) config file")
    common.add_argument("--preset", choices=("desk", "paper"), help="configuration preset")
    common.add_argument("--seed", type=int, help="random seed (overrides OASIS_SEED and config)")
    common.add_argument("--out", type=Path, default=Path("oasis_out"), help="output directory")
    common.add_argument("--device", default=None, help="torch device string (cpu)")

    parser = _Parser(prog="oasis", description="Edge-aware memory-based video object segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic DAVIS-layout dataset")
    p.add_argument("--n-sequences", type=int, help="number of sequences (default: data.n_train)")

    p = sub.add_parser("pretrain", parents=[common], help="pseudo-video pretraining on stills")
    p.add_argument("--data", type=Path, help="DAVIS-layout root supplying image/mask stills")

    p = sub.add_parser("train", parents=[common], help="main training on video clips")
    p.add_argument("--data", type=Path, help="DAVIS-layout training root (default: synthetic)")
    p.add_argument("--init", type=Path, help="checkpoint to start from")

    p = sub.add_parser("infer", parents=[common], help="segment sequences, write PNGs and a zip")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="DAVIS-layout root")
    p.add_argument("--split-file", type=Path, help="file listing sequence names")

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", type=Path, required=True, help="root with Annotations/ predictions")
    p.add_argument("--gt", type=Path, required=True, help="DAVIS-layout ground-truth root")
    p.add_argument("--split-file", type=Path, help="file listing sequence names")
    p.add_argument("--seen-unseen", type=Path, help="CSV of sequence,seen|unseen for G")

    p = sub.add_parser("bench", parents=[common], help="single-stream frames per second")
    p.add_argument("--checkpoint", type=Path, help="model to time (default: fresh weights)")
    p.add_argument("--warmup", type=int, help="warmup frames (default: eval.warmup_frames)")
    p.add_argument("--frames", type=int, help="timed frames (default: eval.timed_frames)")

    p = sub.add_parser("viz", parents=[common], help="frame/mask/structure/edge panels as PNGs")
    p.add_argument("--checkpoint", type=Path, help="model (default: fresh weights)")
    p.add_argument("--data", type=Path, help="DAVIS-layout root (default: synthetic)")
    p.add_argument("--sequence", help="sequence name (default: first)")

    p = sub.add_parser("sweep", parents=[common], help="J&F over a grid of epsilon and beta")
    p.add_argument("--epsilon", type=_float_list, help="comma-separated epsilon values")
    p.add_argument("--beta", type=_float_list, help="comma-separated beta values")
    p.add_argument("--checkpoint", type=Path, help="model to evaluate (default: fresh weights)")
    p.add_argument("--data", type=Path, help="DAVIS-layout validation root (default: synthetic)")
    p.add_argument("--retrain", action="store_true",
                   help="train a model per grid point instead of re-scoring one checkpoint")

    p = sub.add_parser("structmap", parents=[common], help="ground-truth structure map of a mask")
    p.add_argument("--mask", type=Path, required=True, help="palette PNG annotation")
    p.add_argument("--boundary-width", type=int, help="default: model.boundary_width")

    p = sub.add_parser("edges", parents=[common], help="Canny edge map of an image")
    p.add_argument("--image", type=Path, required=True)
    return parser


# ---------------------------------------------------------------------------
# helpers


def _device(cfg: RunConfig) -> torch.device:
    try:
        dev = torch.device(cfg.device)
    except RuntimeError as e:
        raise InvalidInputError(f"bad --device {cfg.device!r}: {e}") from None
    if dev.type != "cpu":
        raise InvalidInputError(f"device {cfg.device!r} is not supported; this build runs on cpu")
    return dev


def _synthetic_layout(cfg: RunConfig, root: Path, n: int, seed: int) -> oio.DatasetLayout:
    if (root / "ImageSets" / "all.txt").exists():
        return oio.DatasetLayout(root, root / "ImageSets" / "all.txt")
    generate_synthetic(cfg.synthetic, n, seed, root)
    return oio.DatasetLayout(root, root / "ImageSets" / "all.txt")


def _layout(data: Path | None, split_file: Path | None = None) -> oio.DatasetLayout:
    if not Path(data).is_dir():
        raise InvalidInputError(f"data directory not found: {data}")
    layout = oio.DatasetLayout(data, split_file)
    if not layout.sequences():
        raise InvalidInputError(f"no sequences under {data}")
    return layout


def _val_layout(args, cfg: RunConfig) -> oio.DatasetLayout:
    if args.data is not None:
        return _layout(args.data)
    return _synthetic_layout(cfg, args.out / "data_val", cfg.data.n_val, cfg.seed + 1000)


def _model(cfg: RunConfig, checkpoint: Path | None) -> OASIS:
    if checkpoint is not None:
        return oio.load_checkpoint(checkpoint)
    logger.warning("no checkpoint given; using freshly initialised weights")
    return build_model(cfg.model, cfg.seed).eval()


def _score(model: OASIS, layout: oio.DatasetLayout, cfg: RunConfig) -> dict:
    results = {}
    for name in layout.sequences():
        seq = oio.load_sequence(layout, name)
        preds = propagate_video(seq.frames, seq.masks[0], model)
        keep = [t for t, m in enumerate(seq.masks) if m is not None]
        results[name] = evaluate_sequence([preds[t] for t in keep], [seq.masks[t] for t in keep],
                                          cfg.eval.skip_first_last, cfg.eval.tolerance_frac)
    return results


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, cfg: RunConfig) -> dict:
    n = args.n_sequences if args.n_sequences is not None else cfg.data.n_train
    if n <= 0:
        raise InvalidInputError("--n-sequences must be positive")
    layout = generate_synthetic(cfg.synthetic, n, cfg.seed, args.out)
    return {"sequences": n, "frames_per_sequence": cfg.synthetic.n_frames,
            "canvas": cfg.synthetic.canvas, "root": str(layout.root)}


def cmd_pretrain(args, cfg: RunConfig) -> dict:
    pairs = []
    if args.data is not None:
        layout = _layout(args.data)
        for name in layout.sequences():
            seq = oio.load_sequence(layout, name)
            pairs += [(f.pixels, m.labels) for f, m in zip(seq.frames, seq.masks) if m is not None]
    else:
        n_seq = max(1, -(-cfg.data.n_pretrain_images // cfg.synthetic.n_frames))
        for frames, labels in synthetic_sequences(cfg.synthetic, n_seq, cfg.seed + 2000):
            pairs += list(zip(frames, labels))
        pairs = pairs[:cfg.data.n_pretrain_images]
    model = build_model(cfg.model, cfg.seed)
    tcfg = dataclasses.replace(cfg.pretrain, seed=cfg.seed)
    res = pretrain_static(pairs, model, tcfg, cfg.loss, args.out)
    write_config(cfg, args.out / "config.ini")
    return {"iterations": len(res.history), "final_loss": res.history[-1]["total"],
            "checkpoint": str(res.checkpoint), "log": str(res.log_path), "stills": len(pairs)}


def cmd_train(args, cfg: RunConfig) -> dict:
    if args.data is not None:
        layout = _layout(args.data)
    else:
        layout = _synthetic_layout(cfg, args.out / "data_train", cfg.data.n_train, cfg.seed)
    dataset = SequenceDataset.from_layout(layout)
    if args.init is not None:
        model = oio.load_checkpoint(args.init)
        if model.cfg != cfg.model:
            logger.warning("model options come from the --init checkpoint, not the config")
    else:
        model = build_model(cfg.model, cfg.seed)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    res = train(dataset, model, tcfg, cfg.loss, args.out)
    write_config(cfg, args.out / "config.ini")
    return {"iterations": len(res.history), "final_loss": res.history[-1]["total"],
            "checkpoint": str(res.checkpoint), "log": str(res.log_path), "sequences": len(dataset)}


def cmd_infer(args, cfg: RunConfig) -> dict:
    model = oio.load_checkpoint(args.checkpoint)
    layout = _layout(args.data, args.split_file)
    out_layout = oio.DatasetLayout(args.out)
    names = layout.sequences()
    n_frames = 0
    for name in names:
        seq = oio.load_sequence(layout, name)
        preds = propagate_video(seq.frames, seq.masks[0], model)
        oio.save_predictions(preds, out_layout, name, seq.palette, seq.frame_names)
        n_frames += len(preds)
    zpath = oio.zip_predictions(out_layout, args.out / "predictions.zip")
    return {"sequences": len(names), "frames": n_frames, "zip": str(zpath)}


def _read_split(path: Path) -> dict:
    split = {}
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if len(row) >= 2 and row[1].strip() in ("seen", "unseen"):
                split[row[0].strip()] = row[1].strip()
    if not split:
        raise InvalidInputError(f"{path} has no sequence,seen|unseen rows")
    return split


def cmd_eval(args, cfg: RunConfig) -> dict:
    gt_layout = _layout(args.gt, args.split_file)
    pred_layout = oio.DatasetLayout(args.pred)
    results = {}
    for name in gt_layout.sequences():
        seq = oio.load_sequence(gt_layout, name)
        preds = oio.load_annotations(pred_layout, name)
        p_list, g_list = [], []
        for fname, m in zip(seq.frame_names, seq.masks):
            if m is None:
                continue
            if fname not in preds:
                raise oio.DatasetError(f"missing prediction for frame {fname}",
                                       pred_layout.annotations_dir / name, name)
            p_list.append(preds[fname])
            g_list.append(m)
        results[name] = evaluate_sequence(p_list, g_list, cfg.eval.skip_first_last,
                                          cfg.eval.tolerance_frac)
    split = _read_split(args.seen_unseen) if args.seen_unseen else None
    summary = summarize(results, split)
    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "per_object.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sequence", "object_id", "J", "F", "JF"])
        for name, r in results.items():
            for oid, j, fv in zip(r.object_ids, r.per_object_J, r.per_object_F):
                w.writerow([name, oid, f"{j:.6f}", f"{fv:.6f}", f"{(j + fv) / 2:.6f}"])
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return {**summary, "sequences": len(results), "csv": str(args.out / "per_object.csv")}


def cmd_bench(args, cfg: RunConfig) -> dict:
    model = _model(cfg, args.checkpoint)
    warmup = cfg.eval.warmup_frames if args.warmup is None else args.warmup
    timed = cfg.eval.timed_frames if args.frames is None else args.frames
    if timed <= 0 or warmup < 0:
        raise InvalidInputError("need --frames > 0 and --warmup >= 0")
    scfg = dataclasses.replace(cfg.synthetic, n_frames=warmup + timed + 1)
    frames, labels = synthetic_sequences(scfg, 1, cfg.seed)[0]
    video = [FrameTensor(f, t) for t, f in enumerate(frames)]
    session = InferenceSession(model)
    session.start(video[0], IdMask(labels[0]))
    rep = fps_benchmark(session, video[1:], warmup, timed)
    return {"fps": rep.fps, "timed_frames": rep.timed_frames, "seconds": rep.seconds,
            "canvas": scfg.canvas, "parameters": count_parameters(model),
            "structure_decoder_parameters": count_parameters(model.structure_decoder),
            "hardware": rep.hardware}


def cmd_viz(args, cfg: RunConfig) -> dict:
    model = _model(cfg, args.checkpoint)
    layout = _val_layout(args, cfg)
    name = args.sequence or layout.sequences()[0]
    seq = oio.load_sequence(layout, name)
    preds, structs = propagate_video(seq.frames, seq.masks[0], model, return_structure=True)
    out = args.out / "viz" / name
    for t, (frame, mask, s) in enumerate(zip(seq.frames, preds, structs)):
        edges = canny(frame, model.cfg.canny)
        viz.save_image(out / f"panel_{t:05d}.png", viz.panel(frame.pixels, mask, s, edges))
        viz.save_image(out / f"edges_{t:05d}.png", viz.edge_image(edges))
        if s is not None:
            viz.save_image(out / f"structure_{t:05d}.png", viz.structure_image(s))
    return {"sequence": name, "frames": len(preds), "dir": str(out)}


def cmd_sweep(args, cfg: RunConfig) -> dict:
    eps = args.epsilon or [cfg.model.fusion.epsilon]
    betas = args.beta or [cfg.model.fusion.beta]
    layout = _val_layout(args, cfg)
    base = None if args.retrain else _model(cfg, args.checkpoint)
    if args.retrain:
        train_layout = _synthetic_layout(cfg, args.out / "data_train", cfg.data.n_train, cfg.seed)
        dataset = SequenceDataset.from_layout(train_layout)
    rows = []
    for e, b in itertools.product(eps, betas):
        fusion = dataclasses.replace(cfg.model.fusion, epsilon=e, beta=b)
        if args.retrain:
            mcfg = dataclasses.replace(cfg.model, fusion=fusion)
            model = build_model(mcfg, cfg.seed)
            train(dataset, model, dataclasses.replace(cfg.train, seed=cfg.seed), cfg.loss)
        else:
            model = base
            model.cfg = dataclasses.replace(model.cfg, fusion=fusion)
        s = summarize(_score(model, layout, cfg))
        rows.append({"epsilon": e, "beta": b, "JF": s["JF"], "J": s["J"], "F": s["F"]})
    args.out.mkdir(parents=True, exist_ok=True)
    path = args.out / "sweep.csv"
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epsilon", "beta", "JF", "J", "F"])
        w.writeheader()
        for r in rows:
            w.writerow(r)
    best = max(rows, key=lambda r: r["JF"])
    return {"rows": len(rows), "csv": str(path), "best": best}


def cmd_structmap(args, cfg: RunConfig) -> dict:
    labels, _ = oio.read_mask_png(args.mask)
    bw = cfg.model.boundary_width if args.boundary_width is None else args.boundary_width
    s = gt_structure_map(IdMask(labels), bw)
    path = viz.save_image(args.out / (args.mask.stem + "_structure.png"), viz.structure_image(s))
    return {"output": str(path), "boundary_pixels": int(s.values.sum()),
            "boundary_width": bw}


def cmd_edges(args, cfg: RunConfig) -> dict:
    px = oio.read_frame(args.image)
    h, w = px.shape[1:]
    # edges are defined for any size; pad to the frame contract and crop back
    ph, pw = -h % 16, -w % 16
    padded = np.pad(px, ((0, 0), (0, ph), (0, pw)), mode="edge")
    e = canny(FrameTensor(padded), cfg.model.canny).values[:, :h, :w]
    path = viz.save_image(args.out / (args.image.stem + "_edges.png"), viz.edge_image(e))
    return {"output": str(path), "edge_pixels": int(e.sum())}


_HANDLERS = {
    "gen": cmd_gen, "pretrain": cmd_pretrain, "train": cmd_train, "infer": cmd_infer,
    "eval": cmd_eval, "bench": cmd_bench, "viz": cmd_viz, "sweep": cmd_sweep,
    "structmap": cmd_structmap, "edges": cmd_edges,
}


def main(argv: list | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        cfg = load_config(args.config, args.preset, args.seed, args.device)
        _device(cfg)
        torch.manual_seed(cfg.seed)
        summary = _HANDLERS[args.command](args, cfg)
    except InvalidInputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report anything else as internal
        logger.exception("internal error")
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "seed": cfg.seed, **summary}, default=str))
    return 0


def main_exit():
    sys.exit(main())
