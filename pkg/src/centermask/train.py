"""Run configuration, the training loop, checkpoints and dataset-level inference."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as data_mod
from .decode import DecodeConfig, Detection, decode_instances
from .evaluate import ApReport, match_and_score
from .losses import Batch, LossBreakdown, LossConfig, TrainingAbort, compute_losses
from .model import ModelConfig, ModelParams, build_model, forward
from .optim import Adam, OptimConfig, learning_rate
from .serialize import CheckpointVersionError, load_checkpoint, save_checkpoint
from .targets import TargetEncoding, encode_targets, rasterize_classes
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "centermask"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    scenes: data_mod.SceneConfig = field(default_factory=data_mod.SceneConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    steps: int = 5000
    batch_size: int = 8
    seed: int = 0
    train_seeds: tuple[int, int] = (0, 10)  # (first, count)
    eval_seeds: tuple[int, int] = (100000, 50)
    dataset: Optional[str] = None  # directory in the exported format; overrides train_seeds
    checkpoint_every: int = 500
    # periodic train-set evaluation; training stops early once ap50 reaches stop_ap50
    eval_every: int = 0
    stop_ap50: Optional[float] = None
    out: str = "runs/default"

    def __post_init__(self):
        self.train_seeds = tuple(int(v) for v in self.train_seeds)
        self.eval_seeds = tuple(int(v) for v in self.eval_seeds)
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if tuple(self.scenes.canvas) != tuple(self.model.input_size):
            raise ValueError(f"scene canvas {self.scenes.canvas} differs from model input {self.model.input_size}")
        if self.scenes.num_classes != self.model.num_classes:
            raise ValueError("scene and model num_classes differ")
        if self.decode.ablation != self.loss.ablation:
            raise ValueError("decode and loss ablation modes differ")

    def to_dict(self) -> dict:
        d = {
            "model": self.model.to_dict(),
            "loss": asdict(self.loss),
            "decode": asdict(self.decode),
            "scenes": asdict(self.scenes),
            "optim": self.optim.to_dict(),
        }
        for k in ("steps", "batch_size", "seed", "dataset", "checkpoint_every", "eval_every", "stop_ap50", "out"):
            d[k] = getattr(self, k)
        d["train_seeds"] = list(self.train_seeds)
        d["eval_seeds"] = list(self.eval_seeds)
        d["scenes"]["canvas"] = list(self.scenes.canvas)
        d["scenes"]["num_objects"] = list(self.scenes.num_objects)
        d["scenes"]["size_range"] = list(self.scenes.size_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        sub = {
            "model": ModelConfig.from_dict,
            "loss": lambda x: LossConfig(**x),
            "decode": lambda x: DecodeConfig(**x),
            "scenes": lambda x: data_mod.SceneConfig(**x),
            "optim": lambda x: OptimConfig(**x),
        }
        for k, make in sub.items():
            if k in d:
                d[k] = make(d[k])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- data ---------------------------------------------------------------------

@dataclass
class Example:
    scene: data_mod.Scene
    encoding: TargetEncoding
    saliency: Optional[np.ndarray]


def prepare_examples(scenes: Sequence[data_mod.Scene], model: ModelConfig, with_saliency: bool) -> list[Example]:
    out = []
    for s in scenes:
        enc = encode_targets(s.instances, model.num_classes, model.input_size, model.output_stride)
        sal = None
        if with_saliency:
            sal = rasterize_classes(s.instances, model.saliency_channels, model.output_size, model.output_stride)
        out.append(Example(s, enc, sal))
    return out


def training_scenes(cfg: RunConfig) -> list[data_mod.Scene]:
    if cfg.dataset:
        return list(data_mod.load_dataset(cfg.dataset))
    first, count = cfg.train_seeds
    return data_mod.generate_scenes(cfg.scenes, range(first, first + count))


def sample_batch(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for one step; depends only on (seed, step) so resumed runs replay exactly."""
    rng = np.random.default_rng([int(seed), int(step)])
    return rng.choice(n, size=batch_size, replace=n < batch_size)


# -- one step -------------------------------------------------------------------

def loss_on_batch(params: ModelParams, examples: Sequence[Example], cfg: RunConfig,
                  stats: Optional[dict] = None) -> LossBreakdown:
    m = cfg.model
    dtype = params["fuse.weight"].dtype
    images = Tensor(np.stack([e.scene.image for e in examples]), dtype=dtype)
    sal = [e.saliency for e in examples] if cfg.loss.aux_enabled(m.saliency_mode) else None
    batch = Batch.collate([e.encoding for e in examples], sal)
    out = forward(params, images, centers=batch.shape_points())
    return compute_losses(out, batch, cfg.loss, m.output_stride, m.saliency_mode, stats)


# -- checkpoints ----------------------------------------------------------------

def checkpoint_header(cfg: RunConfig, step: int) -> dict:
    return {"kind": CHECKPOINT_KIND, "step": int(step), "run_config": cfg.to_dict()}


def save_state(path, cfg: RunConfig, params: ModelParams, opt: Optional[Adam], step: int) -> None:
    names = list(params.tensors)
    tensors = {f"param.{k}": v for k, v in params.arrays().items()}
    if opt is not None:
        tensors.update(opt.state(names))
    save_checkpoint(path, checkpoint_header(cfg, step), tensors)


def load_model(path, expect: Optional[ModelConfig] = None) -> tuple[RunConfig, ModelParams, dict, dict]:
    """Rebuild a model from a checkpoint; ``expect`` must match its stored model config."""
    header, tensors = load_checkpoint(path)
    if header.get("kind") != CHECKPOINT_KIND or "run_config" not in header:
        raise CheckpointVersionError(f"{path}: header is not a centermask checkpoint")
    cfg = RunConfig.from_dict(header["run_config"])
    if expect is not None and expect.to_dict() != cfg.model.to_dict():
        raise CheckpointVersionError(f"{path}: model config {cfg.model.to_dict()} incompatible with {expect.to_dict()}")
    dtype = next(v.dtype for k, v in tensors.items() if k.startswith("param."))
    params = build_model(cfg.model, dtype=dtype)
    params.load_arrays({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
    return cfg, params, header, tensors


# -- inference --------------------------------------------------------------------

def predict(params: ModelParams, images: Sequence[np.ndarray], decode: DecodeConfig,
            batch_size: int = 8, stats: Optional[dict] = None) -> list[list[Detection]]:
    dtype = params["fuse.weight"].dtype
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            chunk = Tensor(np.stack(images[i:i + batch_size]), dtype=dtype)
            heads = forward(params, chunk)
            for j in range(chunk.shape[0]):
                out.append(decode_instances(heads.image(j), params.config, decode, stats))
    return out


def evaluate_scenes(params: ModelParams, scenes: Sequence[data_mod.Scene], decode: DecodeConfig) -> ApReport:
    dets = predict(params, [s.image for s in scenes], decode)
    gts = [s.instances for s in scenes]
    H, W = params.config.input_size
    return match_and_score(dets, gts, params.config.num_classes, canvas_area=H * W)


# -- loop ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams
    step: int
    history: list[dict]
    aborted: bool = False
    train_report: Optional[ApReport] = None


def train(cfg: RunConfig, resume: Optional[str] = None, scenes: Optional[Sequence[data_mod.Scene]] = None,
          write: bool = True, on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Train from scratch (or resume); logs one JSON record per step to ``out/train_log.jsonl``.

    A non-finite loss stops the run; the newest checkpoint on disk is the last good
    state and is left untouched.
    """
    out = Path(cfg.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "run_config.json")
    scenes = list(scenes) if scenes is not None else training_scenes(cfg)
    if not scenes:
        raise ValueError("no training scenes")
    examples = prepare_examples(scenes, cfg.model, cfg.loss.aux_enabled(cfg.model.saliency_mode))

    params = build_model(cfg.model, rng_seed=cfg.seed)
    names = list(params.tensors)
    opt = Adam(params.trainable(), cfg.optim)
    start = 0
    if resume is not None:
        ckpt_cfg, loaded, header, tensors = load_model(resume, expect=cfg.model)
        params.load_arrays(loaded.arrays())
        opt.load_state(names, tensors)
        start = int(header["step"])

    history: list[dict] = []
    log_file = open(out / "train_log.jsonl", "a" if resume else "w") if write else None
    stats: dict = {}
    step = start
    aborted = False
    report = None
    try:
        while step < cfg.steps:
            idx = sample_batch(len(examples), cfg.batch_size, cfg.seed, step)
            lr = learning_rate(cfg.optim, step, cfg.steps)
            opt.zero_grad()
            t0 = time.perf_counter()
            try:
                parts = loss_on_batch(params, [examples[i] for i in idx], cfg, stats)
            except TrainingAbort as exc:
                log.error("step %d: %s; keeping last checkpoint", step, exc)
                aborted = True
                break
            parts.total.backward()
            opt.step(lr)
            step += 1
            rec = {"step": step, "lr": lr, **parts.as_dict()}
            history.append(rec)
            if log_file:
                log_file.write(json.dumps(rec, sort_keys=True) + "\n")
            log.debug("step %d %.3fs %s", step, time.perf_counter() - t0, rec)
            if on_step:
                on_step(rec)
            if write and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_state(out / f"checkpoint-{step:06d}.ckpt", cfg, params, opt, step)
            if cfg.eval_every and step % cfg.eval_every == 0:
                report = evaluate_scenes(params, scenes, cfg.decode)
                log.info("step %d train ap50 %.3f ap %.3f", step, report.ap50 or 0.0, report.ap or 0.0)
                if log_file:
                    log_file.write(json.dumps({"step": step, "train_eval": report.as_dict()}, sort_keys=True) + "\n")
                if cfg.stop_ap50 is not None and (report.ap50 or 0.0) >= cfg.stop_ap50:
                    break
    finally:
        if log_file:
            log_file.close()
    if write and not aborted:
        save_state(out / "final.ckpt", cfg, params, opt, step)
    if stats.get("skipped_boxes"):
        log.warning("skipped %d degenerate boxes during training", stats["skipped_boxes"])
    return TrainResult(params, step, history, aborted, report)
