"""Synthetic scenes with exact visible masks, and an on-disk dataset format.

Dataset layout::

    images/NNNN.png        RGB uint8
    masks/NNNN_k.png       single channel, 0 / 255
    annotations.jsonl      {"image_id", "image", "seed", "instances": [{"class_id", "mask_file"}]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .targets import GroundTruthInstance

SHAPES = ("ellipse", "rectangle", "triangle")
MIN_VISIBLE = 16

# well separated base colours; classes beyond the palette get hashed hues
PALETTE = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.95],
    [0.95, 0.85, 0.20],
    [0.80, 0.30, 0.85],
    [0.20, 0.85, 0.90],
])


class DatasetError(ValueError):
    pass


@dataclass
class SceneConfig:
    canvas: tuple[int, int] = (128, 128)
    num_objects: tuple[int, int] = (1, 4)  # inclusive range
    shape_weights: dict[str, float] = field(default_factory=lambda: {s: 1 / 3 for s in SHAPES})
    size_range: tuple[float, float] = (0.18, 0.42)  # fraction of the shorter canvas side
    overlap_level: float = 0.0
    num_classes: int = 3
    seed: int = 0

    def __post_init__(self):
        self.canvas = tuple(int(v) for v in self.canvas)
        self.num_objects = tuple(int(v) for v in self.num_objects)
        self.size_range = tuple(float(v) for v in self.size_range)
        lo, hi = self.num_objects
        if lo < 0 or hi < lo:
            raise ValueError(f"bad num_objects range {self.num_objects}")
        if not 0 < self.size_range[0] <= self.size_range[1]:
            raise ValueError(f"bad size_range {self.size_range}")
        unknown = set(self.shape_weights) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        if not math.isclose(sum(self.shape_weights.values()), 1.0, abs_tol=1e-6):
            raise ValueError("shape_weights must sum to 1")
        if not 0.0 <= self.overlap_level <= 1.0:
            raise ValueError("overlap_level must lie in [0, 1]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


@dataclass
class Scene:
    image: np.ndarray  # 3 x H x W float in [0, 1]
    instances: list[GroundTruthInstance]
    image_id: int = 0
    seed: Optional[int] = None
    # per-pixel index of the drawn object (-1 background); dropped objects keep their index
    label_map: Optional[np.ndarray] = None


def class_color(class_id: int) -> np.ndarray:
    if class_id < len(PALETTE):
        return PALETTE[class_id]
    hue = (class_id * 0.618034) % 1.0
    return np.array([0.5 + 0.4 * math.cos(2 * math.pi * (hue + k / 3)) for k in range(3)])


def _rasterize(kind: str, cx: float, cy: float, size: float, angle: float, aspect: float,
               shape: tuple[int, int]) -> np.ndarray:
    H, W = shape
    ys, xs = np.mgrid[0:H, 0:W]
    # sample at pixel centres
    dx = xs + 0.5 - cx
    dy = ys + 0.5 - cy
    ca, sa = math.cos(angle), math.sin(angle)
    u = ca * dx + sa * dy
    v = -sa * dx + ca * dy
    a = size / 2.0
    b = size / 2.0 * aspect
    if kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= a) & (np.abs(v) <= b)
    if kind == "triangle":
        verts = [(a * math.cos(t), b * math.sin(t)) for t in (-math.pi / 2, math.pi / 6, 5 * math.pi / 6)]
        inside = np.ones(shape, dtype=bool)
        for (x1, y1), (x2, y2) in zip(verts, verts[1:] + verts[:1]):
            inside &= (x2 - x1) * (v - y1) - (y2 - y1) * (u - x1) >= 0
        return inside
    raise ValueError(f"unknown shape {kind!r}")


def generate_scene(cfg: SceneConfig, seed: Optional[int] = None) -> Scene:
    """Draw a scene back to front; visible masks are disjoint and tiny remnants are dropped."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([int(seed), 0x5CE4E])
    H, W = cfg.canvas
    side = min(H, W)
    names = list(cfg.shape_weights)
    probs = np.array([cfg.shape_weights[n] for n in names], dtype=np.float64)
    probs /= probs.sum()

    bg = rng.uniform(0.05, 0.25, size=3)
    image = np.broadcast_to(bg[:, None, None], (3, H, W)).copy()
    label = np.full((H, W), -1, dtype=np.int64)
    n_obj = int(rng.integers(cfg.num_objects[0], cfg.num_objects[1] + 1))
    classes = []
    centers: list[tuple[float, float, float]] = []
    for k in range(n_obj):
        kind = names[int(rng.choice(len(names), p=probs))]
        size = rng.uniform(*cfg.size_range) * side
        aspect = rng.uniform(0.6, 1.0)
        angle = rng.uniform(0, math.pi)
        if centers and rng.random() < cfg.overlap_level:
            px, py, ps = centers[int(rng.integers(len(centers)))]
            dist = rng.uniform(0.25, 0.6) * (ps + size) / 2
            theta = rng.uniform(0, 2 * math.pi)
            cx = float(np.clip(px + dist * math.cos(theta), 0, W))
            cy = float(np.clip(py + dist * math.sin(theta), 0, H))
        else:
            margin = size * 0.3
            cx = rng.uniform(margin, W - margin)
            cy = rng.uniform(margin, H - margin)
        cls = int(rng.integers(cfg.num_classes))
        region = _rasterize(kind, cx, cy, size, angle, aspect, (H, W))
        color = np.clip(class_color(cls) + rng.uniform(-0.08, 0.08, size=3), 0, 1)
        image[:, region] = color[:, None]
        label[region] = k
        classes.append(cls)
        centers.append((cx, cy, size))

    image += rng.normal(0.0, 0.03, size=image.shape)
    image = np.round(np.clip(image, 0, 1) * 255) / 255.0

    instances = []
    for k, cls in enumerate(classes):
        visible = label == k
        if visible.sum() >= MIN_VISIBLE:
            instances.append(GroundTruthInstance(cls, visible))
    return Scene(image=image, instances=instances, image_id=int(seed), seed=int(seed), label_map=label)


def generate_scenes(cfg: SceneConfig, seeds: Sequence[int]) -> list[Scene]:
    return [generate_scene(cfg, s) for s in seeds]


# -- on-disk format -----------------------------------------------------------

def _image_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def export_dataset(scenes: Sequence[Scene], directory) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for scene in scenes:
        stem = f"{scene.image_id:04d}"
        img_rel = f"images/{stem}.png"
        Image.fromarray(_image_to_uint8(scene.image), mode="RGB").save(root / img_rel)
        insts = []
        for k, inst in enumerate(scene.instances):
            rel = f"masks/{stem}_{k}.png"
            Image.fromarray(inst.mask.astype(np.uint8) * 255, mode="L").save(root / rel)
            insts.append({"class_id": int(inst.class_id), "mask_file": rel})
        rec = {"image_id": int(scene.image_id), "image": img_rel, "seed": scene.seed, "instances": insts}
        lines.append(json.dumps(rec, sort_keys=True))
    (root / "annotations.jsonl").write_text("".join(line + "\n" for line in lines))


def _read_png(path: Path, mode: str, where: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"{where}: missing file {path}")
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert(mode))
    except OSError as exc:
        raise DatasetError(f"{where}: cannot read {path}: {exc}") from None


def load_dataset(directory) -> Iterator[Scene]:
    """Yield validated scenes; raises :class:`DatasetError` naming file and line."""
    root = Path(directory)
    ann = root / "annotations.jsonl"
    if not ann.is_file():
        raise DatasetError(f"{ann}: annotation file not found")
    with open(ann) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            where = f"{ann}:{lineno}"
            try:
                rec = json.loads(line)
                img_rel = rec["image"]
                inst_recs = rec["instances"]
                image_id = int(rec.get("image_id", lineno - 1))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{where}: malformed record ({exc})") from None
            rgb = _read_png(root / img_rel, "RGB", where)
            H, W = rgb.shape[:2]
            instances = []
            for inst in inst_recs:
                try:
                    cls = int(inst["class_id"])
                    mask_rel = inst["mask_file"]
                except (KeyError, TypeError, ValueError) as exc:
                    raise DatasetError(f"{where}: malformed instance ({exc})") from None
                m = _read_png(root / mask_rel, "L", where)
                if m.shape != (H, W):
                    raise DatasetError(f"{where}: mask {root / mask_rel} is {m.shape[1]}x{m.shape[0]}, "
                                       f"image {root / img_rel} is {W}x{H}")
                if not np.isin(m, (0, 255)).all():
                    raise DatasetError(f"{where}: mask {root / mask_rel} is not binary 0/255")
                if not m.any():
                    raise DatasetError(f"{where}: mask {root / mask_rel} is empty")
                instances.append(GroundTruthInstance(cls, m == 255))
            image = rgb.transpose(2, 0, 1).astype(np.float64) / 255.0
            yield Scene(image=image, instances=instances, image_id=image_id, seed=rec.get("seed"))
