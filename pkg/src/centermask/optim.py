"""Adam with a step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimConfig:
    lr: float = 2.5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # lr is divided by ``decay_factor`` once the step passes each fraction of the run
    decay_at: tuple[float, ...] = (0.8,)
    decay_factor: float = 10.0

    def __post_init__(self):
        self.decay_at = tuple(float(v) for v in self.decay_at)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if any(not 0 < f <= 1 for f in self.decay_at):
            raise ValueError("decay_at fractions must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_at"] = list(self.decay_at)
        return d


def learning_rate(cfg: OptimConfig, step: int, total_steps: int) -> float:
    drops = sum(step >= int(round(f * total_steps)) for f in cfg.decay_at)
    return cfg.lr / cfg.decay_factor ** drops


class Adam:
    def __init__(self, params: Sequence[Tensor], cfg: OptimConfig):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            p.data -= (lr / bc1 * m / (np.sqrt(v / bc2) + c.eps)).astype(p.data.dtype)

    def state(self, names: Sequence[str]) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        for n, m, v in zip(names, self.m, self.v):
            out[f"adam.m.{n}"] = m
            out[f"adam.v.{n}"] = v
        return out

    def load_state(self, names: Sequence[str], arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for i, n in enumerate(names):
            self.m[i] = arrays[f"adam.m.{n}"].astype(self.params[i].dtype, copy=True)
            self.v[i] = arrays[f"adam.v.{n}"].astype(self.params[i].dtype, copy=True)
