"""Ground-truth instances and the training targets derived from them.

Coordinates: pixel ``i`` spans ``[i, i+1)``, so a tight box with integer corner
``x_min`` and width ``w`` has centre ``x_min + w / 2``. Feature cell ``k`` at
stride ``R`` covers input pixels ``[k*R, (k+1)*R)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MIN_OVERLAP = 0.7


class EncodingError(ValueError):
    pass


@dataclass
class GroundTruthInstance:
    class_id: int
    mask: np.ndarray  # bool, H_in x W_in

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise EncodingError("instance mask has no foreground pixels")

    @property
    def box(self) -> tuple[int, int, int, int]:
        """Tight box ``(x_min, y_min, w, h)`` in input pixels."""
        rows = np.flatnonzero(self.mask.any(axis=1))
        cols = np.flatnonzero(self.mask.any(axis=0))
        return int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)

    @property
    def center(self) -> tuple[float, float]:
        x, y, w, h = self.box
        return x + w / 2.0, y + h / 2.0

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class TargetEncoding:
    heatmap: np.ndarray  # C x H x W
    center_indices: np.ndarray  # K x 2 integer (x, y) feature cells
    offsets: np.ndarray  # K x 2 (x, y) in [0, 1)
    sizes: np.ndarray  # K x 2 (h, w) input pixels
    boxes: np.ndarray  # K x 4 (x_min, y_min, w, h) input pixels
    class_ids: np.ndarray  # K
    mask_targets: list[np.ndarray] = field(default_factory=list)

    @property
    def num_objects(self) -> int:
        return len(self.class_ids)


def gaussian_radius(box_h: float, box_w: float, min_overlap: float = MIN_OVERLAP) -> float:
    """Largest corner displacement keeping IoU with the true box >= ``min_overlap``.

    Three configurations are bounded and the tightest wins: both corners moved
    the same way (translation), both inward (shrink) and both outward (grow).
    """
    h, w, t = float(box_h), float(box_w), float(min_overlap)
    # translation by r on both axes: (h-r)(w-r) / (2hw - (h-r)(w-r)) >= t
    b1 = h + w
    c1 = w * h * (1 - t) / (1 + t)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4 * c1, 0.0))) / 2
    # shrink: (h-2r)(w-2r) >= t*hw
    b2 = 2 * (h + w)
    c2 = (1 - t) * w * h
    r2 = (b2 - math.sqrt(max(b2 * b2 - 16 * c2, 0.0))) / 8
    # grow: hw >= t (h+2r)(w+2r)
    a3 = 4 * t
    b3 = 2 * t * (h + w)
    c3 = (t - 1) * w * h
    r3 = (-b3 + math.sqrt(max(b3 * b3 - 4 * a3 * c3, 0.0))) / (2 * a3)
    return max(0.0, min(r1, r2, r3))


def _splat(channel: np.ndarray, cx: int, cy: int, radius: float) -> None:
    H, W = channel.shape
    if not (0 <= cx < W and 0 <= cy < H):
        raise EncodingError(f"centre cell ({cx}, {cy}) outside {W}x{H} heatmap")
    r = int(math.floor(radius))
    sigma = radius / 3.0
    y0, y1 = max(0, cy - r), min(H, cy + r + 1)
    x0, x1 = max(0, cx - r), min(W, cx + r + 1)
    dy = np.arange(y0, y1)[:, None] - cy
    dx = np.arange(x0, x1)[None, :] - cx
    d2 = (dx * dx + dy * dy).astype(np.float64)
    if sigma > 0:
        g = np.exp(-d2 / (2 * sigma * sigma))
    else:
        g = (d2 == 0).astype(np.float64)
    np.maximum(channel[y0:y1, x0:x1], g, out=channel[y0:y1, x0:x1])


def center_cell(center: tuple[float, float], stride: int) -> tuple[int, int]:
    return int(math.floor(center[0] / stride)), int(math.floor(center[1] / stride))


def render_heatmap(instances: Sequence[GroundTruthInstance], num_classes: int, out_size: tuple[int, int],
                   stride: int, min_overlap: float = MIN_OVERLAP) -> np.ndarray:
    """Per-class Gaussian centre heatmap, overlapping splats combined by max.

    The radius is computed on the box measured in feature cells; the window is
    ``floor(radius)`` cells and sigma is ``radius / 3``.
    """
    H, W = out_size
    heat = np.zeros((num_classes, H, W))
    for inst in instances:
        _, _, w, h = inst.box
        radius = gaussian_radius(h / stride, w / stride, min_overlap)
        cx, cy = center_cell(inst.center, stride)
        _splat(heat[inst.class_id], cx, cy, radius)
    return heat


def encode_offsets_sizes(instances: Sequence[GroundTruthInstance], stride: int):
    """Return (center_indices, offsets, sizes); offsets are ``p/R - floor(p/R)``."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    idx = np.zeros((len(instances), 2), dtype=np.int64)
    off = np.zeros((len(instances), 2))
    size = np.zeros((len(instances), 2))
    for k, inst in enumerate(instances):
        px, py = inst.center
        qx, qy = px / stride, py / stride
        idx[k] = math.floor(qx), math.floor(qy)
        off[k] = qx - idx[k, 0], qy - idx[k, 1]
        _, _, w, h = inst.box
        size[k] = h, w
    return idx, off, size


def box_grid_shape(h: float, w: float, stride: int) -> tuple[int, int]:
    """Feature-stride grid covering an ``h x w`` box: ``ceil(h/R) x ceil(w/R)``."""
    return max(1, math.ceil(h / stride)), max(1, math.ceil(w / stride))


def encode_mask_target(instance: GroundTruthInstance, stride: int) -> np.ndarray:
    """Tight-box crop of the mask, majority-voted onto R x R cells from the box origin.

    A cell is on when at least half of its in-box pixels are foreground. If no
    cell reaches that (thin shapes), the best-covered cell is switched on so the
    target is never empty.
    """
    x, y, w, h = instance.box
    crop = instance.mask[y:y + h, x:x + w].astype(np.float64)
    gh, gw = box_grid_shape(h, w, stride)
    padded = np.zeros((gh * stride, gw * stride))
    padded[:h, :w] = crop
    inside = np.zeros_like(padded)
    inside[:h, :w] = 1.0
    fg = padded.reshape(gh, stride, gw, stride).sum(axis=(1, 3))
    cnt = inside.reshape(gh, stride, gw, stride).sum(axis=(1, 3))
    cover = fg / cnt
    target = cover >= 0.5
    if not target.any():
        target.flat[int(np.argmax(cover))] = True
    return target


def rasterize_classes(instances: Sequence[GroundTruthInstance], channels: int, out_size: tuple[int, int],
                      stride: int) -> np.ndarray:
    """Union of instance masks per channel at feature stride (majority vote per cell).

    With ``channels == 1`` all classes share one foreground channel.
    """
    H, W = out_size
    out = np.zeros((channels, H, W))
    for inst in instances:
        c = inst.class_id if channels > 1 else 0
        m = inst.mask[:H * stride, :W * stride].astype(np.float64)
        cover = m.reshape(H, stride, W, stride).mean(axis=(1, 3))
        out[c] = np.maximum(out[c], cover)
    return (out >= 0.5).astype(np.float64)


def encode_targets(instances: Sequence[GroundTruthInstance], num_classes: int, input_size: tuple[int, int],
                   stride: int, min_overlap: float = MIN_OVERLAP) -> TargetEncoding:
    H, W = input_size[0] // stride, input_size[1] // stride
    heat = render_heatmap(instances, num_classes, (H, W), stride, min_overlap)
    idx, off, size = encode_offsets_sizes(instances, stride)
    boxes = np.array([inst.box for inst in instances], dtype=np.float64).reshape(-1, 4)
    classes = np.array([inst.class_id for inst in instances], dtype=np.int64)
    masks = [encode_mask_target(inst, stride) for inst in instances]
    return TargetEncoding(heat, idx, off, size, boxes, classes, masks)
