"""COCO-style mask average precision.

Matching follows the public COCO protocol: per image and class, detections in
descending score order greedily take the highest-IoU unmatched ground truth
with IoU >= t. Precision is made monotone and sampled at 101 recall points.
Area buckets are fractions of the canvas area instead of COCO's absolute pixel
thresholds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
SMALL_FRACTION = 1.0 / 64
LARGE_FRACTION = 1.0 / 16


@dataclass
class EvalInstance:
    """Minimal record for evaluation: one mask with a class (and score for detections)."""

    class_id: int
    mask: np.ndarray
    score: float = 1.0


@dataclass
class ApReport:
    ap: Optional[float]
    ap50: Optional[float]
    ap75: Optional[float]
    ap_small: Optional[float]
    ap_medium: Optional[float]
    ap_large: Optional[float]
    per_class: dict[int, Optional[float]] = field(default_factory=dict)
    num_gt: int = 0
    num_det: int = 0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d

    def format(self) -> str:
        def f(v):
            return "  n/a" if v is None else f"{v:.3f}"

        lines = [
            f"AP     {f(self.ap)}",
            f"AP50   {f(self.ap50)}",
            f"AP75   {f(self.ap75)}",
            f"AP_S   {f(self.ap_small)}",
            f"AP_M   {f(self.ap_medium)}",
            f"AP_L   {f(self.ap_large)}",
        ]
        lines += [f"class {c}: {f(v)}" for c, v in sorted(self.per_class.items())]
        lines.append(f"gt={self.num_gt} det={self.num_det}")
        return "\n".join(lines)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: canvas {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(dets: Sequence, gts: Sequence) -> np.ndarray:
    if not dets or not gts:
        return np.zeros((len(dets), len(gts)))
    d = np.stack([np.asarray(x.mask, dtype=bool).reshape(-1) for x in dets]).astype(np.float64)
    g = np.stack([np.asarray(x.mask, dtype=bool).reshape(-1) for x in gts]).astype(np.float64)
    inter = d @ g.T
    union = d.sum(1)[:, None] + g.sum(1)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _match(ious: np.ndarray, gt_ignore: np.ndarray, t: float):
    """Greedy matching of score-sorted dets to gts (gts sorted non-ignored first)."""
    nd, ng = ious.shape
    det_match = np.full(nd, -1)
    gt_taken = np.zeros(ng, dtype=bool)
    for d in range(nd):
        best = min(t, 1 - 1e-10)
        m = -1
        for g in range(ng):
            if gt_taken[g]:
                continue
            # once a real gt is matched, stop at the ignored tail
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if ious[d, g] < best:
                continue
            best = ious[d, g]
            m = g
        if m > -1:
            det_match[d] = m
            gt_taken[m] = True
    return det_match


def _image_class_eval(dets, gts, area_rng, ious, max_dets):
    """Per-threshold (matched, ignored) flags for the score-sorted detections."""
    gt_area = np.array([g.mask.sum() for g in gts], dtype=np.float64)
    gt_ignore = (gt_area < area_rng[0]) | (gt_area > area_rng[1])
    g_order = np.argsort(gt_ignore, kind="mergesort")
    gt_ignore = gt_ignore[g_order]
    d_order = np.argsort([-d.score for d in dets], kind="mergesort")[:max_dets]
    ious = ious[np.ix_(d_order, g_order)] if ious.size else np.zeros((len(d_order), len(g_order)))
    det_area = np.array([dets[i].mask.sum() for i in d_order], dtype=np.float64)
    det_out = (det_area < area_rng[0]) | (det_area > area_rng[1])
    scores = np.array([dets[i].score for i in d_order], dtype=np.float64)
    matched = np.zeros((len(IOU_THRESHOLDS), len(d_order)), dtype=bool)
    ignored = np.zeros_like(matched)
    for ti, t in enumerate(IOU_THRESHOLDS):
        dm = _match(ious, gt_ignore, t)
        matched[ti] = dm > -1
        if len(gt_ignore):
            ignored[ti] = np.where(dm > -1, gt_ignore[np.maximum(dm, 0)], det_out)
        else:
            ignored[ti] = det_out
    return scores, matched, ignored, int((~gt_ignore).sum())


def _accumulate(per_image) -> np.ndarray:
    """101-point interpolated precision per threshold; -1 rows where no gt."""
    out = np.full(len(IOU_THRESHOLDS), -1.0)
    if not per_image:
        return out
    npig = sum(x[3] for x in per_image)
    if npig == 0:
        return out
    scores = np.concatenate([x[0] for x in per_image])
    order = np.argsort(-scores, kind="mergesort")
    matched = np.concatenate([x[1] for x in per_image], axis=1)[:, order]
    ignored = np.concatenate([x[2] for x in per_image], axis=1)[:, order]
    for ti in range(len(IOU_THRESHOLDS)):
        tps = np.cumsum(matched[ti] & ~ignored[ti]).astype(np.float64)
        fps = np.cumsum(~matched[ti] & ~ignored[ti]).astype(np.float64)
        nd = len(tps)
        q = np.zeros(len(RECALL_POINTS))
        if nd:
            rc = tps / npig
            denom = tps + fps
            # leading ignored detections have no precision yet; count them as 0
            pr = np.where(denom > 0, tps / np.maximum(denom, 1.0), 0.0)
            pr = np.maximum.accumulate(pr[::-1])[::-1]
            idx = np.searchsorted(rc, RECALL_POINTS, side="left")
            valid = idx < nd
            q[valid] = pr[idx[valid]]
        out[ti] = q.mean()
    return out


def _mean_defined(x: np.ndarray) -> Optional[float]:
    x = x[x > -1]
    return float(x.mean()) if x.size else None


def match_and_score(detections: Sequence[Sequence], ground_truth: Sequence[Sequence], num_classes: int,
                    canvas_area: Optional[float] = None, max_dets: int = 100,
                    small_fraction: float = SMALL_FRACTION, large_fraction: float = LARGE_FRACTION) -> ApReport:
    """Mask AP over a dataset.

    ``detections[i]`` / ``ground_truth[i]`` list the records of image ``i``; each
    needs ``class_id``, ``mask`` and (detections) ``score`` attributes.
    """
    if len(detections) != len(ground_truth):
        raise ValueError(f"{len(detections)} detection lists for {len(ground_truth)} images")
    if canvas_area is None:
        sample = next((g.mask for gl in ground_truth for g in gl), None)
        if sample is None:
            sample = next((d.mask for dl in detections for d in dl), np.zeros((1, 1)))
        canvas_area = float(np.asarray(sample).size)
    ranges = {
        "all": (0.0, np.inf),
        "small": (0.0, small_fraction * canvas_area),
        "medium": (small_fraction * canvas_area, large_fraction * canvas_area),
        "large": (large_fraction * canvas_area, np.inf),
    }
    # precision[range][class] -> per-threshold AP
    table = {name: np.full((num_classes, len(IOU_THRESHOLDS)), -1.0) for name in ranges}
    for c in range(num_classes):
        per_range = {name: [] for name in ranges}
        for dl, gl in zip(detections, ground_truth):
            d = [x for x in dl if x.class_id == c]
            g = [x for x in gl if x.class_id == c]
            if not d and not g:
                continue
            ious = iou_matrix(d, g)
            for name, rng in ranges.items():
                per_range[name].append(_image_class_eval(d, g, rng, ious, max_dets))
        for name in ranges:
            table[name][c] = _accumulate(per_range[name])

    all_ = table["all"]
    t50 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.5)))
    t75 = int(np.argmin(np.abs(IOU_THRESHOLDS - 0.75)))
    num_gt = sum(len(g) for g in ground_truth)
    num_det = sum(len(d) for d in detections)
    return ApReport(
        ap=_mean_defined(all_),
        ap50=_mean_defined(all_[:, t50]),
        ap75=_mean_defined(all_[:, t75]),
        ap_small=_mean_defined(table["small"]),
        ap_medium=_mean_defined(table["medium"]),
        ap_large=_mean_defined(table["large"]),
        per_class={c: _mean_defined(all_[c]) for c in range(num_classes)},
        num_gt=num_gt,
        num_det=num_det,
    )
