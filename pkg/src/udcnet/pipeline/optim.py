"""Adam with per-epoch exponential learning-rate decay."""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor
from .config import AdamConfig


class Adam:
    """Moments and step counts are kept per parameter name, so parameters added
    later (the auxiliary decoders) start their own bias correction from 1."""

    def __init__(self, cfg: AdamConfig = AdamConfig()):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def lr_at(self, epoch: int) -> float:
        return self.cfg.lr * self.cfg.decay ** epoch

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray], epoch: int) -> None:
        c = self.cfg
        lr = self.lr_at(epoch)
        for name, g in grads.items():
            p = params[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = c.beta1 * self.m[name] + (1 - c.beta1) * g
            v = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - c.beta1 ** t)
            v_hat = v / (1 - c.beta2 ** t)
            p.assign(p.data - lr * m_hat / (np.sqrt(v_hat) + c.eps))

    def state(self) -> tuple[dict[str, np.ndarray], dict[str, int]]:
        tensors = {}
        for name in self.m:
            tensors[f"adam.m.{name}"] = self.m[name]
            tensors[f"adam.v.{name}"] = self.v[name]
        return tensors, dict(self.t)

    def load(self, tensors: dict[str, np.ndarray], counts: dict[str, int]) -> None:
        self.m = {n[len("adam.m."):]: a.copy() for n, a in tensors.items() if n.startswith("adam.m.")}
        self.v = {n[len("adam.v."):]: a.copy() for n, a in tensors.items() if n.startswith("adam.v.")}
        self.t = {k: int(v) for k, v in counts.items()}
