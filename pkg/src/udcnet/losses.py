"""Training objectives: supervised Dice+BCE, image/feature consistency, ramps, total."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import transform as tf
from .tensor import Tensor, ops

DICE_SMOOTH = 1.0
PROB_CLAMP = 1e-7


def _const(value, like: Tensor) -> Tensor:
    return Tensor(np.asarray(value), dtype=like.dtype)


def dice_term(p: Tensor, y: np.ndarray, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - soft Dice over the whole batch, smoothed in numerator and denominator."""
    yt = _const(y, p)
    inter = ops.sum(ops.mul(p, yt))
    denom = ops.sum(p) + float(y.sum()) + smooth
    return 1.0 - ops.div(2.0 * inter + smooth, denom)


def bce_term(p: Tensor, y: np.ndarray, clamp: float = PROB_CLAMP) -> Tensor:
    pc = ops.clip(p, clamp, 1.0 - clamp)
    yt = _const(y, p)
    pos = ops.mul(yt, ops.log(pc))
    neg = ops.mul(_const(1.0 - y, p), ops.log(1.0 - pc))
    return -ops.mean(pos + neg)


def supervised_loss(p: Tensor, y) -> Tensor:
    y = np.asarray(y)
    if y.shape != p.shape:
        raise ValueError(f"label shape {y.shape} != prediction shape {p.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    y = y.astype(p.dtype)
    return dice_term(p, y) + bce_term(p, y)


def image_consistency_loss(p: Tensor, p_tilde: Tensor, t: tf.Transform) -> Tensor:
    """Mean squared difference between p and the inverse-transformed p_tilde."""
    back = tf.apply(tf.invert(t), p_tilde)
    if back.shape != p.shape:
        raise ValueError(f"inverse-transformed shape {back.shape} != {p.shape}")
    return ops.mean(ops.square(p - back))


def _target(p: Tensor, stop_grad: bool) -> Tensor:
    return p.detach() if stop_grad else p


def feature_consistency_loss(p: Tensor, q_list: Sequence[Tensor], stop_grad_p: bool = False) -> Tensor:
    """Mean over voxels and decoders of (p - q^k)^2."""
    if not q_list:
        raise ValueError("feature consistency needs K >= 1 auxiliary predictions")
    target = _target(p, stop_grad_p)
    total = None
    for q in q_list:
        if q.shape != p.shape:
            raise ValueError(f"auxiliary prediction shape {q.shape} != {p.shape}")
        term = ops.sum(ops.square(target - q))
        total = term if total is None else total + term
    return total / float(len(q_list) * p.size)


def masked_feature_consistency_loss(p: Tensor, q_list: Sequence[Tensor], omega,
                                    stop_grad_p: bool = False) -> Tensor:
    """Squared error restricted to reliable voxels, over K * max(|omega|, 1)."""
    if not q_list:
        raise ValueError("feature consistency needs K >= 1 auxiliary predictions")
    omega = np.asarray(omega, dtype=bool)
    if omega.shape != p.shape:
        raise ValueError(f"mask shape {omega.shape} != prediction shape {p.shape}")
    count = int(omega.sum())
    if count == 0:
        return ops.scalar_mul(ops.sum(p), 0.0)
    target = _target(p, stop_grad_p)
    total = None
    for q in q_list:
        term = ops.sum(ops.square(ops.mask_select(target - q, omega)))
        total = term if total is None else total + term
    return total / float(len(q_list) * count)


def ramp_weight(step: float, ramp_length: float) -> float:
    """Sigmoid-shaped ramp exp(-5 (1 - t)^2), t = min(step / ramp_length, 1)."""
    if ramp_length <= 0:
        raise ValueError("ramp_length must be positive")
    if step < 0:
        raise ValueError("step must be non-negative")
    t = min(step / ramp_length, 1.0)
    return math.exp(-5.0 * (1.0 - t) ** 2)


def total_loss(l_s, l_ic, l_ufc, alpha: float, beta: float):
    """L_S + alpha L_IC + beta L_UFC; terms may be Tensors, floats, or None (absent)."""
    out = l_s
    if l_ic is not None and alpha:
        out = out + l_ic * float(alpha)
    if l_ufc is not None and beta:
        out = out + l_ufc * float(beta)
    return out


@dataclass
class LossReport:
    step: int
    phase: int
    L_S: float
    total: float
    L_IC: float | None = None
    L_FC_unmasked: float | None = None
    L_UFC: float | None = None
    alpha: float | None = None
    beta: float | None = None
    omega_fraction: float | None = None
    flags: list[str] = field(default_factory=list)

    def recomputed_total(self) -> float:
        return total_loss(self.L_S, self.L_IC, self.L_UFC, self.alpha or 0.0, self.beta or 0.0)

    def to_json(self) -> str:
        record = {"step": self.step, "phase": self.phase, "L_S": self.L_S}
        for key in ("L_IC", "L_FC_unmasked", "L_UFC", "alpha", "beta", "omega_fraction"):
            value = getattr(self, key)
            if value is not None:
                record[key] = value
        record["total"] = self.total
        if self.flags:
            record["flags"] = self.flags
        return json.dumps(record)
