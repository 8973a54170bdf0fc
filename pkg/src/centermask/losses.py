"""Training objective: centre focal loss, offset/size L1, assembled-mask BCE.

All losses take batched head maps (N x C x H x W) plus a :class:`Batch` of
encoded targets and return scalar tensors on the tape.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .model import CLASS_SPECIFIC, HeadOutputs
from .targets import TargetEncoding, box_grid_shape
from .tensor import DimensionError, Tensor

log = logging.getLogger(__name__)

FULL = "full"
SHAPE_ONLY = "shape_only"
SALIENCY_ONLY = "saliency_only"
ABLATIONS = (FULL, SHAPE_ONLY, SALIENCY_ONLY)


class TrainingAbort(FloatingPointError):
    """A loss term became NaN or infinite."""


@dataclass
class LossConfig:
    alpha: float = 2.0
    beta: float = 4.0
    lambda_p: float = 1.0
    lambda_off: float = 1.0
    lambda_size: float = 0.1
    lambda_mask: float = 1.0
    aux_saliency: Optional[bool] = None  # None: on for class-specific saliency
    aux_weight: float = 1.0
    ablation: str = FULL

    def __post_init__(self):
        for name in ("lambda_p", "lambda_off", "lambda_size", "lambda_mask", "alpha", "beta", "aux_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {ABLATIONS}, got {self.ablation!r}")

    def aux_enabled(self, saliency_mode: str) -> bool:
        if self.aux_saliency is None:
            return saliency_mode == CLASS_SPECIFIC
        return self.aux_saliency


@dataclass
class LossBreakdown:
    L_p: float
    L_off: float
    L_size: float
    L_mask: float
    L_aux: float
    L_seg: float
    total: Tensor = field(repr=False)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("L_p", "L_off", "L_size", "L_mask", "L_aux", "L_seg")}


@dataclass
class Batch:
    """Targets of several images flattened to per-object arrays."""

    heatmap: np.ndarray  # N x C x H x W
    batch_idx: np.ndarray  # K
    centers: np.ndarray  # K x 2 (x, y) cells
    offsets: np.ndarray  # K x 2
    sizes: np.ndarray  # K x 2 (h, w)
    boxes: np.ndarray  # K x 4 (x_min, y_min, w, h)
    class_ids: np.ndarray  # K
    mask_targets: list[np.ndarray]
    saliency_targets: Optional[np.ndarray] = None  # N x Cs x H x W

    @property
    def num_objects(self) -> int:
        return len(self.class_ids)

    def shape_points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.batch_idx, self.centers[:, 1], self.centers[:, 0]

    @classmethod
    def collate(cls, encodings: Sequence[TargetEncoding],
                saliency_targets: Optional[Sequence[np.ndarray]] = None) -> "Batch":
        bidx = np.concatenate([np.full(e.num_objects, i, dtype=np.int64) for i, e in enumerate(encodings)])
        cat = lambda name, width: np.concatenate(  # noqa: E731
            [getattr(e, name).reshape(-1, width) for e in encodings])
        masks = [m for e in encodings for m in e.mask_targets]
        sal = np.stack(saliency_targets) if saliency_targets is not None else None
        return cls(
            heatmap=np.stack([e.heatmap for e in encodings]),
            batch_idx=bidx,
            centers=cat("center_indices", 2).astype(np.int64),
            offsets=cat("offsets", 2),
            sizes=cat("sizes", 2),
            boxes=cat("boxes", 4),
            class_ids=np.concatenate([e.class_ids for e in encodings]).astype(np.int64),
            mask_targets=masks,
            saliency_targets=sal,
        )


def focal_center_loss(heatmap_logits: Tensor, Y: np.ndarray, N: int, alpha: float = 2.0, beta: float = 4.0) -> Tensor:
    """Penalty-reduced pixel-wise focal loss over the centre heatmap, divided by ``max(N, 1)``."""
    Y = np.asarray(Y, dtype=heatmap_logits.dtype)
    if Y.shape != heatmap_logits.shape:
        raise DimensionError(f"focal_center_loss: target {Y.shape} vs logits {heatmap_logits.shape}")
    pos = (Y == 1.0).astype(Y.dtype)
    neg_weight = (1.0 - pos) * (1.0 - Y) ** beta
    neg_x = ops.mul(heatmap_logits, -1.0)
    # log p = logsig(x), log(1-p) = logsig(-x), 1-p = sig(-x)
    pos_term = ops.power(ops.sigmoid(neg_x), alpha) * ops.log_sigmoid(heatmap_logits)
    neg_term = ops.power(ops.sigmoid(heatmap_logits), alpha) * ops.log_sigmoid(neg_x)
    total = ops.sum(pos_term * pos + neg_term * neg_weight)
    return total * (-1.0 / max(N, 1))


def _at_centers(head: Tensor, batch: Batch) -> Tensor:
    b, ys, xs = batch.shape_points()
    return ops.gather_points(head, b, ys, xs)


def _l1_at_centers(head: Tensor, targets, center_indices, N, batch_idx) -> Tensor:
    if head.ndim == 3:
        head = ops.reshape(head, (1,) + head.shape)
    center_indices = np.asarray(center_indices, dtype=np.int64).reshape(-1, 2)
    k = len(center_indices)
    N = k if N is None else N
    if k == 0 or N == 0:
        return ops.sum(head) * 0.0
    if batch_idx is None:
        batch_idx = np.zeros(k, dtype=np.int64)
    pred = ops.gather_points(head, batch_idx, center_indices[:, 1], center_indices[:, 0])
    target = np.asarray(targets, dtype=head.dtype).reshape(k, 2)
    return ops.sum(ops.abs(pred - target)) * (1.0 / N)


def offset_loss(offset_map: Tensor, targets, center_indices, N: Optional[int] = None,
                batch_idx=None) -> Tensor:
    """Sum over objects of |predicted - true| offset at each centre cell, divided by N.

    ``center_indices`` are (x, y) cells; ``offset_map`` is 2 x H x W or batched.
    """
    return _l1_at_centers(offset_map, targets, center_indices, N, batch_idx)


def size_loss(size_map: Tensor, targets, center_indices, N: Optional[int] = None, batch_idx=None) -> Tensor:
    """As :func:`offset_loss` for the (h, w) size map, in input pixels."""
    return _l1_at_centers(size_map, targets, center_indices, N, batch_idx)


def local_shape_logits(shape_vector: Tensor, grid: tuple[int, int]) -> Tensor:
    """S*S vector -> S x S (row-major) -> bilinear resize to the box grid."""
    s = int(round(math.sqrt(shape_vector.size)))
    if s * s != shape_vector.size:
        raise DimensionError(f"shape vector of length {shape_vector.size} is not a square")
    return ops.bilinear_resize(ops.reshape(shape_vector, (s, s)), *grid)


def saliency_window(saliency: Tensor, box: Sequence[float], grid: tuple[int, int], stride: int) -> Tensor:
    """Sample a (H x W) saliency channel on the box grid.

    Cell ``j`` of the grid is centred at input x = ``x0 + (j + 0.5) * R``, i.e. at
    feature index ``x0 / R + j``; non-integer origins are bilinearly interpolated.
    """
    x0, y0 = box[0], box[1]
    return ops.roi_sample(saliency, y0 / stride, x0 / stride, *grid)


def mask_loss(shape_vectors: Tensor, saliency: Tensor, batch: Batch, stride: int,
              saliency_mode: str, ablation: str = FULL, stats: Optional[dict] = None) -> Tensor:
    """Mean over objects of the pixel-averaged BCE between the assembled mask and its target.

    ``shape_vectors`` holds one S*S row per object (in batch order); saliency is
    N x Cs x H x W. Crops use ground-truth boxes.
    """
    if ablation not in ABLATIONS:
        raise ValueError(f"unknown ablation {ablation!r}")
    terms = []
    skipped = 0
    for k in range(batch.num_objects):
        x0, y0, w, h = batch.boxes[k]
        if w <= 0 or h <= 0:
            skipped += 1
            continue
        target = batch.mask_targets[k]
        grid = box_grid_shape(h, w, stride)
        if target.shape != grid:
            raise DimensionError(f"mask target {target.shape} does not match box grid {grid}")
        channel = int(batch.class_ids[k]) if saliency_mode == CLASS_SPECIFIC else 0
        if ablation == SALIENCY_ONLY:
            L = None
        else:
            L = local_shape_logits(ops.take(shape_vectors, k), grid)
        if ablation == SHAPE_ONLY:
            G = None
        else:
            sal = ops.take(saliency, (int(batch.batch_idx[k]), channel))
            G = saliency_window(sal, (x0, y0, w, h), grid, stride)
        if L is not None and G is not None:
            bce = ops.assembled_bce(L, G, target)
        else:
            bce = ops.bce_with_logits(L if L is not None else G, target)
        terms.append(ops.mean(bce))
    if skipped:
        log.warning("mask_loss skipped %d degenerate boxes", skipped)
        if stats is not None:
            stats["skipped_boxes"] = stats.get("skipped_boxes", 0) + skipped
    if not terms:
        return ops.sum(saliency) * 0.0
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def aux_saliency_loss(saliency_logits: Tensor, target: np.ndarray) -> Tensor:
    """Pixel-averaged BCE of the saliency map against the rasterised per-class GT union."""
    return ops.mean(ops.bce_with_logits(saliency_logits, target))


def total_loss(parts: dict[str, Tensor], config: LossConfig) -> LossBreakdown:
    """Weighted sum of the four terms (+ aux). Raises :class:`TrainingAbort` on non-finite parts."""
    weights = {
        "L_p": config.lambda_p,
        "L_off": config.lambda_off,
        "L_size": config.lambda_size,
        "L_mask": config.lambda_mask,
        "L_aux": config.aux_weight,
    }
    values = {}
    total: Optional[Tensor] = None
    for name, weight in weights.items():
        part = parts.get(name)
        if part is None:
            values[name] = 0.0
            continue
        v = float(part.data)
        if not math.isfinite(v):
            raise TrainingAbort(f"loss term {name} is not finite ({v})")
        values[name] = v
        term = part * weight
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    return LossBreakdown(L_seg=float(total.data), total=total, **values)


def compute_losses(outputs: HeadOutputs, batch: Batch, config: LossConfig, stride: int,
                   saliency_mode: str, stats: Optional[dict] = None) -> LossBreakdown:
    """All loss terms for one batch; ``outputs`` must carry sparse ``shape_vectors``."""
    N = batch.num_objects
    parts = {
        "L_p": focal_center_loss(outputs.heatmap, batch.heatmap, N, config.alpha, config.beta),
        "L_off": offset_loss(outputs.offset, batch.offsets, batch.centers, N, batch.batch_idx),
        "L_size": size_loss(outputs.size, batch.sizes, batch.centers, N, batch.batch_idx),
    }
    if N:
        shape_vectors = outputs.shape_vectors
        if shape_vectors is None:
            shape_vectors = _at_centers(outputs.shape, batch)
        parts["L_mask"] = mask_loss(shape_vectors, outputs.saliency, batch, stride, saliency_mode,
                                    config.ablation, stats)
    if config.aux_enabled(saliency_mode):
        if batch.saliency_targets is None:
            raise ValueError("aux saliency loss enabled but batch has no saliency targets")
        parts["L_aux"] = aux_saliency_loss(outputs.saliency, batch.saliency_targets)
    return total_loss(parts, config)
