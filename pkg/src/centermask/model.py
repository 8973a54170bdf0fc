"""Small fully convolutional backbone with the five prediction heads.

The backbone is a plain stack of stride-2 3x3 convolutions. The deepest map is
upsampled back to the output stride and fused with the stride-matched skip
feature. Every head is a 3x3 conv + relu followed by a 1x1 projection:

    heatmap  C channels (logits)
    offset   2 channels (x, y)
    shape    S*S channels
    size     2 channels (h, w) in input pixels
    saliency 1 (class agnostic) or C (class specific) channels (logits)
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .tensor import DimensionError, Tensor

HEADS = ("heatmap", "offset", "shape", "size", "saliency")
CLASS_AGNOSTIC = "class_agnostic"
CLASS_SPECIFIC = "class_specific"
HEATMAP_PRIOR = 0.01


@dataclass
class ModelConfig:
    num_classes: int = 3
    shape_size: int = 32
    output_stride: int = 4
    saliency_mode: str = CLASS_AGNOSTIC
    backbone_channels: tuple[int, ...] = (16, 32, 64, 64)
    feature_channels: int = 32
    head_channels: int = 32
    input_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.shape_size < 2:
            raise ValueError(f"shape_size must be >= 2, got {self.shape_size}")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        r = self.output_stride
        if r < 2 or r & (r - 1):
            raise ValueError(f"output_stride must be a power of two >= 2, got {r}")
        if any(s % r for s in self.input_size):
            raise ValueError(f"output_stride {r} must divide input size {self.input_size}")
        if self.skip_stage >= len(self.backbone_channels):
            raise ValueError(f"backbone needs more than {self.skip_stage} stages for stride {r}")
        if self.saliency_mode not in (CLASS_AGNOSTIC, CLASS_SPECIFIC):
            raise ValueError(f"unknown saliency_mode {self.saliency_mode!r}")
        deepest = 2 ** len(self.backbone_channels)
        if any(s % deepest for s in self.input_size):
            raise ValueError(f"input size {self.input_size} not divisible by backbone stride {deepest}")

    @property
    def skip_stage(self) -> int:
        # index of the stage whose output has stride R (stage i has stride 2**(i+1))
        return int(math.log2(self.output_stride)) - 1

    @property
    def output_size(self) -> tuple[int, int]:
        return self.input_size[0] // self.output_stride, self.input_size[1] // self.output_stride

    @property
    def saliency_channels(self) -> int:
        return self.num_classes if self.saliency_mode == CLASS_SPECIFIC else 1

    def head_out_channels(self) -> dict[str, int]:
        return {
            "heatmap": self.num_classes,
            "offset": 2,
            "shape": self.shape_size ** 2,
            "size": 2,
            "saliency": self.saliency_channels,
        }

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def trainable(self) -> list[Tensor]:
        return list(self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self.tensors.items():
            arr = arrays[k]
            if arr.shape != t.shape:
                raise DimensionError(f"parameter {k}: expected {t.shape}, checkpoint has {arr.shape}")
            t.data = arr.astype(t.dtype, copy=True)


@dataclass
class HeadOutputs:
    """Batched head maps, each N x channels x H x W.

    During training ``shape`` may be ``None`` with ``shape_vectors`` holding the
    S*S shape vectors at the requested centre points only (K x S*S).
    """

    heatmap: Tensor
    offset: Tensor
    shape: Optional[Tensor]
    size: Tensor
    saliency: Tensor
    shape_vectors: Optional[Tensor] = None

    def image(self, i: int) -> dict[str, np.ndarray]:
        """Plain arrays for one image of the batch (no batch axis)."""
        out = {k: getattr(self, k).data[i] for k in HEADS if getattr(self, k) is not None}
        return out


def _he(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def build_model(config: ModelConfig, rng_seed: int = 0, dtype=None) -> ModelParams:
    rng = np.random.default_rng(rng_seed)
    t: dict[str, np.ndarray] = {}
    chans = config.backbone_channels
    prev = 3
    for i, c in enumerate(chans):
        t[f"stage{i}.weight"] = _he(rng, (c, prev, 3, 3))
        t[f"stage{i}.bias"] = np.zeros(c)
        prev = c
    t["deep.weight"] = _he(rng, (prev, prev, 3, 3))
    t["deep.bias"] = np.zeros(prev)
    f = config.feature_channels
    t["lateral.weight"] = _he(rng, (f, prev, 1, 1))
    t["lateral.bias"] = np.zeros(f)
    t["skip.weight"] = _he(rng, (f, chans[config.skip_stage], 1, 1))
    t["skip.bias"] = np.zeros(f)
    t["fuse.weight"] = _he(rng, (f, f, 3, 3))
    t["fuse.bias"] = np.zeros(f)

    hc = config.head_channels
    for name, out_c in config.head_out_channels().items():
        t[f"{name}.hidden.weight"] = _he(rng, (hc, f, 3, 3))
        t[f"{name}.hidden.bias"] = np.zeros(hc)
        t[f"{name}.out.weight"] = rng.normal(0.0, 0.01, size=(out_c, hc, 1, 1))
        t[f"{name}.out.bias"] = np.zeros(out_c)
    t["heatmap.out.bias"][:] = -math.log((1 - HEATMAP_PRIOR) / HEATMAP_PRIOR)

    tensors = {k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in t.items()}
    return ModelParams(config, tensors)


def _conv(p: ModelParams, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = p[f"{name}.weight"]
    pad = w.shape[-1] // 2
    return ops.conv2d(x, w, p[f"{name}.bias"], stride=stride, padding=pad)


def backbone(params: ModelParams, images: Tensor) -> Tensor:
    cfg = params.config
    x = images
    skip = None
    for i in range(len(cfg.backbone_channels)):
        x = ops.relu(_conv(params, f"stage{i}", x, stride=2))
        if i == cfg.skip_stage:
            skip = x
    x = ops.relu(_conv(params, "deep", x))
    factor = 2 ** len(cfg.backbone_channels) // cfg.output_stride
    top = ops.upsample_nearest(_conv(params, "lateral", x), factor)
    x = ops.relu(top + _conv(params, "skip", skip))
    return ops.relu(_conv(params, "fuse", x))


def forward(params: ModelParams, image, centers: Optional[tuple] = None) -> HeadOutputs:
    """Run the network on one image (3 x H x W) or a batch (N x 3 x H x W).

    ``centers`` = (batch_idx, ys, xs) switches the shape head to sparse mode: its
    1x1 projection is applied only at those points, which is identical to
    gathering from the dense map but avoids materialising S*S x H x W.
    """
    cfg = params.config
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=params["fuse.weight"].dtype)
    if x.ndim == 3:
        x = ops.reshape(x, (1,) + x.shape)
    expected = (3,) + cfg.input_size
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DimensionError(f"forward: expected image of shape {expected}, got {x.shape[-3:]}")

    feat = backbone(params, x)
    names = list(cfg.head_out_channels())
    hc = cfg.head_channels
    # all five hidden 3x3 convs share one im2col pass
    w = ops.concat([params[f"{n}.hidden.weight"] for n in names], axis=0)
    b = ops.concat([params[f"{n}.hidden.bias"] for n in names], axis=0)
    hidden = ops.relu(ops.conv2d(feat, w, b, stride=1, padding=1))
    outs: dict[str, Optional[Tensor]] = {}
    shape_vectors = None
    for k, name in enumerate(names):
        h = ops.slice_channels(hidden, k * hc, hc)
        if name == "shape" and centers is not None:
            bi, ys, xs = centers
            pts = ops.gather_points(h, bi, ys, xs)
            wmat = ops.reshape(params["shape.out.weight"], (cfg.shape_size ** 2, hc))
            shape_vectors = ops.linear(pts, wmat, params["shape.out.bias"])
            outs[name] = None
            continue
        outs[name] = _conv(params, f"{name}.out", h)
    return HeadOutputs(shape_vectors=shape_vectors, **outs)

