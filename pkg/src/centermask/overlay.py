"""PNG overlays of instance masks, boxes and labels."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from PIL import Image, ImageDraw

from .data import class_color


def render_overlay(image: np.ndarray, instances: Sequence, alpha: float = 0.45) -> Image.Image:
    """Blend masks onto a 3 x H x W image; instances need ``class_id`` and ``mask``.

    Objects carrying ``box`` (x, y, h, w) and ``score`` also get a rectangle and a label.
    """
    rgb = np.clip(np.asarray(image, dtype=np.float64).transpose(1, 2, 0), 0, 1).copy()
    for inst in instances:
        m = np.asarray(inst.mask, dtype=bool)
        color = class_color(int(inst.class_id))
        rgb[m] = (1 - alpha) * rgb[m] + alpha * color
    im = Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB")
    draw = ImageDraw.Draw(im)
    for inst in instances:
        box = getattr(inst, "box", None)
        if box is None or not hasattr(inst, "score"):
            continue
        x, y, h, w = box
        color = tuple(int(v * 255) for v in class_color(int(inst.class_id)))
        draw.rectangle([x, y, x + w - 1, y + h - 1], outline=color)
        draw.text((x + 1, y + 1), f"{inst.class_id}:{inst.score:.2f}", fill=(255, 255, 255))
    return im


def side_by_side(panels: Sequence[Image.Image], gap: int = 4) -> Image.Image:
    w = sum(p.width for p in panels) + gap * (len(panels) - 1)
    h = max(p.height for p in panels)
    out = Image.new("RGB", (w, h), (0, 0, 0))
    x = 0
    for p in panels:
        out.paste(p, (x, 0))
        x += p.width + gap
    return out
