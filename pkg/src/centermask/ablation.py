"""Shape-only / saliency-only / combined comparison on low- and high-overlap suites."""

from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import Optional

from .data import SceneConfig, generate_scenes
from .evaluate import ApReport
from .losses import ABLATIONS, FULL
from .model import ModelParams
from .overlay import render_overlay, side_by_side
from .train import RunConfig, evaluate_scenes, load_model, predict, train

log = logging.getLogger(__name__)

SUITES = {"low_overlap": 0.0, "high_overlap": 1.0}
LOW_SEED_BASE = 200000
HIGH_SEED_BASE = 300000


def suite_config(base: SceneConfig, overlap: float) -> SceneConfig:
    return dataclasses.replace(base, overlap_level=overlap)


def suite_scenes(cfg: RunConfig, name: str, count: int):
    base = LOW_SEED_BASE if name == "low_overlap" else HIGH_SEED_BASE
    return generate_scenes(suite_config(cfg.scenes, SUITES[name]), range(base, base + count))


def mode_config(cfg: RunConfig, mode: str, out: Path) -> RunConfig:
    return dataclasses.replace(
        cfg,
        loss=dataclasses.replace(cfg.loss, ablation=mode),
        decode=dataclasses.replace(cfg.decode, ablation=mode),
        out=str(out / mode),
    )


def format_table(reports: dict[str, dict[str, ApReport]]) -> str:
    def f(v):
        return "n/a" if v is None else f"{v:.3f}"

    lines = ["| suite | mode | AP | AP50 | AP75 |", "|---|---|---|---|---|"]
    for suite, per_mode in reports.items():
        for mode, r in per_mode.items():
            lines.append(f"| {suite} | {mode} | {f(r.ap)} | {f(r.ap50)} | {f(r.ap75)} |")
    return "\n".join(lines)


def run_ablation(cfg: RunConfig, out, num_test: int = 200, checkpoints: Optional[dict[str, str]] = None,
                 num_overlays: int = 4) -> dict[str, dict[str, ApReport]]:
    """Train (or load) one model per mode and evaluate each on both suites.

    Writes ``ablation.json``, ``ablation.md`` and side-by-side overlays
    (ground truth, then one panel per mode) under ``out``.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    models: dict[str, ModelParams] = {}
    for mode in ABLATIONS:
        if checkpoints and mode in checkpoints:
            _, params, _, _ = load_model(checkpoints[mode], expect=cfg.model)
        else:
            log.info("training %s", mode)
            params = train(mode_config(cfg, mode, out)).params
        models[mode] = params

    reports: dict[str, dict[str, ApReport]] = {}
    for suite in SUITES:
        scenes = suite_scenes(cfg, suite, num_test)
        reports[suite] = {}
        preds = {}
        for mode in ABLATIONS:
            dec = dataclasses.replace(cfg.decode, ablation=mode)
            reports[suite][mode] = evaluate_scenes(models[mode], scenes, dec)
            preds[mode] = predict(models[mode], [s.image for s in scenes[:num_overlays]], dec)
        odir = out / "overlays" / suite
        odir.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(scenes[:num_overlays]):
            panels = [render_overlay(s.image, s.instances)]
            panels += [render_overlay(s.image, preds[m][i]) for m in ABLATIONS]
            side_by_side(panels).save(odir / f"{s.image_id:04d}.png")

    record = {suite: {m: r.as_dict() for m, r in per.items()} for suite, per in reports.items()}
    (out / "ablation.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    table = format_table(reports)
    (out / "ablation.md").write_text(table + "\n\nPanels: ground truth, " + ", ".join(ABLATIONS) + "\n")
    return reports


def trend_holds(reports: dict[str, dict[str, ApReport]], tolerance: float = 0.1) -> dict[str, bool]:
    """The two comparative checks: combined wins under overlap, saliency-only keeps up without it."""
    high = reports["high_overlap"]
    low = reports["low_overlap"]
    full_ap = high[FULL].ap or 0.0
    return {
        "high_overlap_full_beats_single": all(full_ap >= (high[m].ap or 0.0) for m in ABLATIONS if m != FULL),
        "low_overlap_saliency_close": abs((low["saliency_only"].ap50 or 0.0) - (low[FULL].ap50 or 0.0)) <= tolerance,
    }
