"""Inference: heatmap peaks -> centres -> local shapes x cropped saliency -> masks.

No suppression step is applied; every windowed local maximum among the top-k
scores becomes a detection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import ops
from .losses import ABLATIONS, FULL, SALIENCY_ONLY, SHAPE_ONLY
from .model import CLASS_SPECIFIC, ModelConfig
from .targets import box_grid_shape
from .tensor import Tensor, no_grad


@dataclass
class DecodeConfig:
    top_k: int = 100
    window: int = 3
    mask_threshold: float = 0.4
    score_threshold: float = 0.0
    ablation: str = FULL

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and >= 1, got {self.window}")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError(f"mask_threshold must lie in (0, 1), got {self.mask_threshold}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")


class Peak(NamedTuple):
    class_id: int
    y: int
    x: int
    score: float


@dataclass
class Detection:
    class_id: int
    score: float
    center: tuple[float, float]  # (x, y) input pixels
    box: tuple[float, float, float, float]  # (x, y, h, w): top-left corner and size
    mask: np.ndarray  # bool H_in x W_in

    @property
    def area(self) -> int:
        return int(self.mask.sum())


def _sigmoid(z):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def local_maxima(logits: np.ndarray, window: int) -> np.ndarray:
    """Boolean map of pixels >= every neighbour in their window (per channel)."""
    r = window // 2
    if r == 0:
        return np.ones(logits.shape, dtype=bool)
    padded = np.pad(logits.astype(np.float64), ((0, 0), (r, r), (r, r)), constant_values=-np.inf)
    hmax = sliding_window_view(padded, (window, window), axis=(1, 2)).max(axis=(-2, -1))
    return logits >= hmax


def extract_peaks(heatmap_logits: np.ndarray, cfg: DecodeConfig) -> list[Peak]:
    """Windowed local maxima across all channels, best ``top_k`` by score.

    Plateaus keep every tied pixel; ordering is score descending, then flat index
    ``(c, y, x)`` ascending. Comparisons use logits, so saturation in the sigmoid
    never merges distinct values. Pixels with score <= ``score_threshold`` are
    dropped.
    """
    logits = np.asarray(heatmap_logits)
    is_peak = local_maxima(logits, cfg.window)
    flat = np.flatnonzero(is_peak.reshape(-1))
    vals = logits.reshape(-1)[flat].astype(np.float64)
    order = np.argsort(-vals, kind="stable")[: cfg.top_k]
    C, H, W = logits.shape
    peaks = []
    for i in order:
        score = float(_sigmoid(vals[i]))
        if score <= cfg.score_threshold:
            break
        c, rem = divmod(int(flat[i]), H * W)
        y, x = divmod(rem, W)
        peaks.append(Peak(c, y, x, score))
    return peaks


def refine_center(peak: Peak, offset_map: np.ndarray, stride: int) -> tuple[float, float]:
    """Centre in input pixels: ``(cell + predicted offset) * R`` as (x, y)."""
    ox = float(offset_map[0, peak.y, peak.x])
    oy = float(offset_map[1, peak.y, peak.x])
    return (peak.x + ox) * stride, (peak.y + oy) * stride


def predicted_size(peak: Peak, size_map: np.ndarray) -> tuple[float, float]:
    """(h, w) read at the peak cell, clamped to at least one pixel."""
    return max(float(size_map[0, peak.y, peak.x]), 1.0), max(float(size_map[1, peak.y, peak.x]), 1.0)


def build_local_shape(shape_map: np.ndarray, peak: Peak, size_map: np.ndarray, stride: int) -> np.ndarray:
    """Shape vector at the peak -> S x S -> bilinear resize to ``ceil(h/R) x ceil(w/R)``."""
    h, w = predicted_size(peak, size_map)
    grid = box_grid_shape(h, w, stride)
    vec = np.asarray(shape_map[:, peak.y, peak.x], dtype=np.float64)
    s = int(round(math.sqrt(vec.size)))
    with no_grad():
        out = ops.bilinear_resize(Tensor(vec.reshape(s, s), dtype=np.float64), *grid)
    return out.data


def crop_saliency(saliency_logits: np.ndarray, box: tuple[float, float, float, float], class_id: int,
                  mode: str, stride: int, input_size: tuple[int, int]) -> np.ndarray:
    """Saliency logits sampled on the box grid; cells centred outside the image get -inf.

    ``box`` is (x, y, h, w) in input pixels.
    """
    x0, y0, h, w = box
    gh, gw = box_grid_shape(h, w, stride)
    channel = class_id if mode == CLASS_SPECIFIC else 0
    sal = np.asarray(saliency_logits[channel], dtype=np.float64)
    with no_grad():
        g = ops.roi_sample(Tensor(sal, dtype=np.float64), y0 / stride, x0 / stride, gh, gw).data.copy()
    cy = y0 + (np.arange(gh) + 0.5) * stride
    cx = x0 + (np.arange(gw) + 0.5) * stride
    outside = ((cy < 0) | (cy >= input_size[0]))[:, None] | ((cx < 0) | (cx >= input_size[1]))[None, :]
    g[outside] = -np.inf
    return g


def assemble_probabilities(L: Optional[np.ndarray], G: Optional[np.ndarray], ablation: str = FULL) -> np.ndarray:
    """sigmoid(L) * sigmoid(G), or a single branch under the ablation modes."""
    if ablation == SHAPE_ONLY:
        return _sigmoid(L)
    if ablation == SALIENCY_ONLY:
        return _sigmoid(G)
    if L.shape != G.shape:
        raise ValueError(f"local shape {L.shape} and saliency crop {G.shape} differ")
    return _sigmoid(L) * _sigmoid(G)


def paste_mask(cells: np.ndarray, box: tuple[float, float, float, float], stride: int,
               input_size: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour paste of a box-grid mask onto the full canvas.

    Pixel ``(py, px)`` belongs to the box when its centre lies in
    ``[y0, y0+h) x [x0, x0+w)`` and reads grid cell ``floor((p + 0.5 - origin) / R)``.
    """
    x0, y0, h, w = box
    H, W = input_size
    canvas = np.zeros((H, W), dtype=bool)
    ys = np.arange(H) + 0.5
    xs = np.arange(W) + 0.5
    row_ok = (ys >= y0) & (ys < y0 + h)
    col_ok = (xs >= x0) & (xs < x0 + w)
    if not row_ok.any() or not col_ok.any():
        return canvas
    rows = np.flatnonzero(row_ok)
    cols = np.flatnonzero(col_ok)
    ci = np.minimum(np.floor((ys[rows] - y0) / stride).astype(np.int64), cells.shape[0] - 1)
    cj = np.minimum(np.floor((xs[cols] - x0) / stride).astype(np.int64), cells.shape[1] - 1)
    canvas[np.ix_(rows, cols)] = cells[np.ix_(ci, cj)]
    return canvas


def assemble(L: Optional[np.ndarray], G: Optional[np.ndarray], cfg: DecodeConfig,
             box: tuple[float, float, float, float], stride: int, input_size: tuple[int, int]) -> np.ndarray:
    """Threshold the assembled mask and paste it into an input-sized boolean canvas."""
    probs = assemble_probabilities(L, G, cfg.ablation)
    return paste_mask(probs >= cfg.mask_threshold, box, stride, input_size)


def decode_instances(head: dict[str, np.ndarray], model_cfg: ModelConfig, cfg: DecodeConfig,
                     stats: Optional[dict] = None) -> list[Detection]:
    """Detections for one image from its unbatched head maps (see ``HeadOutputs.image``).

    Boxes that miss the image entirely are dropped and counted in
    ``stats["dropped_outside"]``.
    """
    R = model_cfg.output_stride
    size_in = model_cfg.input_size
    dets = []
    for peak in extract_peaks(head["heatmap"], cfg):
        cx, cy = refine_center(peak, head["offset"], R)
        h, w = predicted_size(peak, head["size"])
        box = (cx - w / 2.0, cy - h / 2.0, h, w)
        if box[0] >= size_in[1] or box[1] >= size_in[0] or box[0] + w <= 0 or box[1] + h <= 0:
            if stats is not None:
                stats["dropped_outside"] = stats.get("dropped_outside", 0) + 1
            continue
        L = G = None
        if cfg.ablation != SALIENCY_ONLY:
            L = build_local_shape(head["shape"], peak, head["size"], R)
        if cfg.ablation != SHAPE_ONLY:
            G = crop_saliency(head["saliency"], box, peak.class_id, model_cfg.saliency_mode, R, size_in)
        mask = assemble(L, G, cfg, box, R, size_in)
        dets.append(Detection(peak.class_id, peak.score, (cx, cy), box, mask))
    return dets
