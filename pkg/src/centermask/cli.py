"""Command line entry point: ``centermask {generate,train,infer,eval,ablate,render}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import data as data_mod
from .ablation import run_ablation, trend_holds
from .decode import DecodeConfig
from .evaluate import EvalInstance, match_and_score
from .losses import ABLATIONS, TrainingAbort
from .model import CLASS_AGNOSTIC, CLASS_SPECIFIC
from .overlay import render_overlay
from .records import RecordError, detection_record, read_detections, write_detections
from .serialize import CheckpointVersionError, SerializationError
from .train import RunConfig, evaluate_scenes, load_model, predict, train

log = logging.getLogger("centermask")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
ABLATION_FLAGS = {m.replace("_", "-"): m for m in ABLATIONS}
SALIENCY_FLAGS = {"agnostic": CLASS_AGNOSTIC, "specific": CLASS_SPECIFIC}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _thread_limit():
    n = os.environ.get("CENTERMASK_THREADS")
    if not n:
        return nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise UsageError(f"CENTERMASK_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=limit)


def _run_config(args) -> RunConfig:
    """RunConfig from --config, then command-line overrides."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    d = cfg.to_dict()
    if getattr(args, "seed", None) is not None:
        d["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        d["steps"] = args.steps
    if getattr(args, "out", None) is not None:
        d["out"] = args.out
    if getattr(args, "ablation", None) is not None:
        d["loss"]["ablation"] = d["decode"]["ablation"] = ABLATION_FLAGS[args.ablation]
    if getattr(args, "saliency_mode", None) is not None:
        d["model"]["saliency_mode"] = SALIENCY_FLAGS[args.saliency_mode]
    if getattr(args, "shape_size", None) is not None:
        d["model"]["shape_size"] = args.shape_size
    if getattr(args, "top_k", None) is not None:
        d["decode"]["top_k"] = args.top_k
    if getattr(args, "mask_threshold", None) is not None:
        d["decode"]["mask_threshold"] = args.mask_threshold
    if getattr(args, "dataset", None) is not None:
        d["dataset"] = args.dataset
    try:
        return RunConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _decode_config(args, base: DecodeConfig) -> DecodeConfig:
    d = dataclasses.asdict(base)
    if args.top_k is not None:
        d["top_k"] = args.top_k
    if args.mask_threshold is not None:
        d["mask_threshold"] = args.mask_threshold
    if args.ablation is not None:
        d["ablation"] = ABLATION_FLAGS[args.ablation]
    try:
        return DecodeConfig(**d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = data_mod.SceneConfig(overlap_level=args.overlap, num_classes=args.num_classes)
    scenes = data_mod.generate_scenes(cfg, range(args.seed, args.seed + args.count))
    data_mod.export_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    res = train(cfg, resume=args.resume)
    if res.aborted:
        print("training aborted on a non-finite loss; last good checkpoint kept", file=sys.stderr)
        return EXIT_RUNTIME
    out = Path(cfg.out)
    last = res.history[-1] if res.history else {}
    print(f"trained {res.step} steps; final L_seg {last.get('L_seg', float('nan')):.4f}")
    first, count = cfg.eval_seeds
    if count:
        scenes = data_mod.generate_scenes(cfg.scenes, range(first, first + count))
        report = evaluate_scenes(res.params, scenes, cfg.decode)
        _write_json(out / "eval_report.json", report.as_dict())
        print(report.format())
    return EXIT_OK


def _load_images(args) -> tuple[list[int], list[np.ndarray]]:
    if args.dataset:
        scenes = list(data_mod.load_dataset(args.dataset))
        return [s.image_id for s in scenes], [s.image for s in scenes]
    ids, images = [], []
    for i, p in enumerate(args.images):
        from PIL import Image

        with Image.open(p) as im:
            images.append(np.asarray(im.convert("RGB")).transpose(2, 0, 1) / 255.0)
        ids.append(i)
    return ids, images


def cmd_infer(args) -> int:
    if not args.dataset and not args.images:
        raise UsageError("infer needs --dataset DIR or image paths")
    run_cfg, params, _, _ = load_model(args.checkpoint)
    if args.shape_size is not None and args.shape_size != run_cfg.model.shape_size:
        raise CheckpointVersionError(f"checkpoint has shape size {run_cfg.model.shape_size}, not {args.shape_size}")
    dec = _decode_config(args, run_cfg.decode)
    ids, images = _load_images(args)
    for img in images:
        if img.shape[1:] != tuple(run_cfg.model.input_size):
            raise ValueError(f"image size {img.shape[1:]} does not match model input {run_cfg.model.input_size}")
    stats: dict = {}
    dets = predict(params, images, dec, stats=stats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.jsonl", [detection_record(i, d) for i, d in zip(ids, dets)])
    if args.overlays:
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for i, img, d in zip(ids, images, dets):
            render_overlay(img, d).save(odir / f"{i:04d}.png")
    if stats.get("dropped_outside"):
        log.warning("dropped %d detections whose box lies outside the image", stats["dropped_outside"])
    print(f"{sum(len(d) for d in dets)} detections on {len(images)} images -> {out / 'detections.jsonl'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    scenes = list(data_mod.load_dataset(args.dataset))
    by_id = read_detections(args.detections)
    unknown = set(by_id) - {s.image_id for s in scenes}
    if unknown:
        raise RecordError(f"{args.detections}: image ids {sorted(unknown)[:5]} are not in {args.dataset}")
    gts = [[EvalInstance(g.class_id, g.mask) for g in s.instances] for s in scenes]
    dets = [by_id.get(s.image_id, []) for s in scenes]
    num_classes = args.num_classes or 1 + max([g.class_id for gl in gts for g in gl] + [0])
    area = float(np.prod(scenes[0].image.shape[1:])) if scenes else None
    report = match_and_score(dets, gts, num_classes, canvas_area=area)
    print(report.format())
    if args.out:
        _write_json(Path(args.out) / "report.json", report.as_dict())
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    ckpts = None
    if args.checkpoints:
        ckpts = {}
        for item in args.checkpoints:
            mode, _, path = item.partition("=")
            if mode not in ABLATION_FLAGS or not path:
                raise UsageError(f"--checkpoints expects MODE=PATH with MODE in {sorted(ABLATION_FLAGS)}")
            ckpts[ABLATION_FLAGS[mode]] = path
    reports = run_ablation(cfg, cfg.out, num_test=args.num_test, checkpoints=ckpts)
    print((Path(cfg.out) / "ablation.md").read_text())
    for name, ok in trend_holds(reports).items():
        print(f"{name}: {'yes' if ok else 'no'}")
    return EXIT_OK


def cmd_render(args) -> int:
    scenes = list(data_mod.load_dataset(args.dataset))
    by_id = read_detections(args.detections) if args.detections else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in scenes:
        insts = s.instances if by_id is None else _as_drawable(by_id.get(s.image_id, []))
        render_overlay(s.image, insts).save(out / f"{s.image_id:04d}.png")
    print(f"rendered {len(scenes)} overlays to {out}")
    return EXIT_OK


def _as_drawable(dets: Sequence[EvalInstance]):
    out = []
    for d in dets:
        rows = np.flatnonzero(d.mask.any(axis=1))
        cols = np.flatnonzero(d.mask.any(axis=0))
        if rows.size:
            box = (cols[0], rows[0], rows[-1] - rows[0] + 1, cols[-1] - cols[0] + 1)
            out.append(_Drawn(d.class_id, d.mask, d.score, box))
    return out


@dataclasses.dataclass
class _Drawn:
    class_id: int
    mask: np.ndarray
    score: float
    box: tuple


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="centermask", description="Centre-point instance segmentation on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def run_flags(sp):
        sp.add_argument("--config", help="RunConfig JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--steps", type=int)
        sp.add_argument("--ablation", choices=sorted(ABLATION_FLAGS))
        sp.add_argument("--saliency-mode", choices=sorted(SALIENCY_FLAGS))
        sp.add_argument("--shape-size", type=int)
        sp.add_argument("--top-k", type=int)
        sp.add_argument("--mask-threshold", type=float)
        sp.add_argument("--out")

    g = sub.add_parser("generate", help="write a synthetic dataset to disk")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--overlap", type=float, default=0.0)
    g.add_argument("--num-classes", type=int, default=3)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    run_flags(t)
    t.add_argument("--dataset", help="train on an exported dataset instead of generated seeds")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="detect instances with a trained checkpoint")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--dataset")
    i.add_argument("images", nargs="*")
    i.add_argument("--ablation", choices=sorted(ABLATION_FLAGS))
    i.add_argument("--shape-size", type=int)
    i.add_argument("--top-k", type=int)
    i.add_argument("--mask-threshold", type=float)
    i.add_argument("--overlays", action="store_true")
    i.add_argument("--out", default="infer_out")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="mask AP of a detections file against a dataset")
    e.add_argument("--detections", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--num-classes", type=int)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare shape-only, saliency-only and combined masks")
    run_flags(a)
    a.add_argument("--num-test", type=int, default=200)
    a.add_argument("--checkpoints", nargs="*", metavar="MODE=PATH")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("render", help="draw ground truth or detections over dataset images")
    r.add_argument("--dataset", required=True)
    r.add_argument("--detections")
    r.add_argument("--out", default="overlays")
    r.set_defaults(func=cmd_render)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"centermask: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingAbort, SerializationError, RecordError, data_mod.DatasetError, OSError, ValueError) as exc:
        print(f"centermask: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
