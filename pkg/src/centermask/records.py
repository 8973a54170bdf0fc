"""Detection records on disk: one JSON object per image, masks as run lengths.

Masks use uncompressed row-major run lengths that start with a (possibly empty)
run of zeros: ``{"size": [H, W], "counts": [z0, o0, z1, ...]}``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evaluate import EvalInstance


class RecordError(ValueError):
    pass


def rle_encode(mask: np.ndarray) -> dict:
    m = np.asarray(mask, dtype=bool)
    flat = m.reshape(-1).astype(np.int8)
    # run boundaries, with a leading zero so the first run counts zeros
    change = np.flatnonzero(np.diff(np.concatenate([[0], flat, [1 - flat[-1] if flat.size else 1]])))
    counts = np.diff(np.concatenate([[0], change])).tolist()
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    try:
        h, w = (int(v) for v in rle["size"])
        counts = [int(c) for c in rle["counts"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"malformed rle ({exc})") from None
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise RecordError(f"rle counts sum to {sum(counts)}, canvas is {h}x{w}")
    values = np.arange(len(counts)) % 2
    return np.repeat(values, counts).astype(bool).reshape(h, w)


def detection_record(image_id: int, dets: Sequence) -> dict:
    return {
        "image_id": int(image_id),
        "detections": [
            {
                "class_id": int(d.class_id),
                "score": float(d.score),
                "box": [float(v) for v in d.box],
                "mask": rle_encode(d.mask),
            }
            for d in dets
        ],
    }


def write_detections(path, records: Iterable[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_detections(path) -> dict[int, list[EvalInstance]]:
    """image_id -> detections; errors name file and line."""
    out: dict[int, list[EvalInstance]] = {}
    with open(Path(path)) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dets = [EvalInstance(int(d["class_id"]), rle_decode(d["mask"]), float(d["score"]))
                        for d in rec["detections"]]
                out.setdefault(int(rec["image_id"]), []).extend(dets)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from None
    return out
