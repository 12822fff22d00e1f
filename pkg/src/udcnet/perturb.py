"""Feature perturbations for the auxiliary decoders.

Every kind is an affine map ``z_tilde = z * M + A`` whose ``M`` and ``A`` are
constants built from the detached main prediction, the rng and (for VAT) a
power iteration. Only ``z`` carries gradient.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import ndimage

from .tensor import Tensor, default_dtype, gradients, ops

log = logging.getLogger(__name__)


class PerturbationKind(enum.Enum):
    FEATURE_NOISE = "FeatureNoise"
    FEATURE_DROPOUT = "FeatureDropout"
    OBJECT_MASKING = "ObjectMasking"
    CONTEXT_MASKING = "ContextMasking"
    GUIDED_CUTOUT = "GuidedCutout"
    INTERMEDIATE_VAT = "IntermediateVAT"
    RANDOM_DROPOUT = "RandomDropout"


# Decoder k (1-based) always uses KINDS[k - 1].
KINDS = tuple(PerturbationKind)


@dataclass(frozen=True)
class PerturbConfig:
    noise_range: float = 0.3
    drop_quantile: tuple[float, float] = (0.6, 0.9)
    dropout_rate: float = 0.5
    cutout_fraction: tuple[float, float] = (0.25, 0.5)
    vat_xi: float = 1e-6
    vat_eps: float = 2.0
    vat_iters: int = 1


@dataclass
class PerturbContext:
    p: np.ndarray            # detached main prediction, (N, 1, D, H, W)
    rng: np.random.Generator
    cfg: PerturbConfig = PerturbConfig()
    decoder_fn: Callable[[Tensor], Tensor] | None = None   # needed for VAT only


class Perturbation(NamedTuple):
    scale: np.ndarray        # M
    offset: np.ndarray | None  # A
    active: bool             # False -> degenerate mask, skip this decoder's loss term

    def apply(self, z: Tensor) -> Tensor:
        out = ops.mul(z, Tensor(self.scale, dtype=z.dtype))
        if self.offset is not None:
            out = ops.add(out, Tensor(self.offset, dtype=z.dtype))
        return out


def object_mask(p: np.ndarray, z_shape: tuple[int, ...]) -> np.ndarray:
    """Threshold ``p`` at 0.5 and max-pool it down to z's spatial grid."""
    fg = (np.asarray(p) > 0.5)
    n = fg.shape[0]
    factors = [a // b for a, b in zip(fg.shape[2:], z_shape[2:])]
    if any(a != b * f for a, b, f in zip(fg.shape[2:], z_shape[2:], factors)):
        raise ValueError(f"prediction grid {fg.shape[2:]} does not downsample to {z_shape[2:]}")
    fd, fh, fw = factors
    d, h, w = z_shape[2:]
    pooled = fg[:, 0].reshape(n, d, fd, h, fh, w, fw).any(axis=(2, 4, 6))
    return pooled[:, None].astype(np.float64)


def _broadcast_mask(mask: np.ndarray, z_shape) -> np.ndarray:
    return np.broadcast_to(mask, z_shape).copy()


def feature_noise(z: np.ndarray, ctx: PerturbContext) -> Perturbation:
    r = ctx.cfg.noise_range
    noise = ctx.rng.uniform(-r, r, size=z.shape) if r > 0 else np.zeros(z.shape)
    return Perturbation(1.0 + noise, None, True)


def feature_dropout(z: np.ndarray, ctx: PerturbContext) -> Perturbation:
    lo, hi = ctx.cfg.drop_quantile
    attention = np.abs(z).mean(axis=1, keepdims=True)
    scale = np.empty_like(attention)
    for i in range(z.shape[0]):
        gamma = ctx.rng.uniform(lo, hi)
        threshold = np.quantile(attention[i], gamma)
        scale[i] = attention[i] < threshold
    return Perturbation(_broadcast_mask(scale, z.shape), None, True)


def _masking(z, ctx, context: bool) -> Perturbation:
    obj = object_mask(ctx.p, z.shape)
    mask = 1.0 - obj if context else obj
    active = True
    for i in range(z.shape[0]):
        if not mask[i].any():
            mask[i] = 1.0
            active = False
    return Perturbation(_broadcast_mask(mask, z.shape), None, active)


def object_masking(z: np.ndarray, ctx: PerturbContext) -> Perturbation:
    return _masking(z, ctx, context=False)


def context_masking(z: np.ndarray, ctx: PerturbContext) -> Perturbation:
    return _masking(z, ctx, context=True)


def guided_cutout(z: np.ndarray, ctx: PerturbContext) -> Perturbation:
    """Zero one random box inside each connected object's bounding box."""
    lo, hi = ctx.cfg.cutout_fraction
    obj = object_mask(ctx.p, z.shape)[:, 0] > 0
    keep = np.ones((z.shape[0], 1) + z.shape[2:])
    active = True
    for i in range(z.shape[0]):
        labels, count = ndimage.label(obj[i])
        if count == 0:
            active = False
            continue
        for box in ndimage.find_objects(labels):
            region = []
            for sl in box:
                extent = sl.stop - sl.start
                side = max(1, int(round(extent * ctx.rng.uniform(lo, hi))))
                start = sl.start + int(ctx.rng.integers(0, extent - side + 1))
                region.append(slice(start, start + side))
            keep[(i, 0) + tuple(region)] = 0.0
    return Perturbation(_broadcast_mask(keep, z.shape), None, active)


def random_dropout(z: np.ndarray, ctx: PerturbContext) -> Perturbation:
    """Channel-wise (spatial) dropout; survivors rescaled by 1/(1-rate)."""
    rate = ctx.cfg.dropout_rate
    keep = ctx.rng.random(z.shape[:2]) >= rate
    scale = keep / (1.0 - rate)
    return Perturbation(_broadcast_mask(scale[:, :, None, None, None], z.shape), None, True)


def binary_kl(p_ref: np.ndarray, q: Tensor, clamp: float = 1e-7) -> Tensor:
    """Mean voxelwise KL(p_ref || q) between Bernoulli outputs."""
    p = np.clip(np.asarray(p_ref, dtype=q.dtype), clamp, 1 - clamp)
    qc = ops.clip(q, clamp, 1 - clamp)
    one = Tensor(np.ones_like(p), dtype=q.dtype)
    pt, pc = Tensor(p, dtype=q.dtype), Tensor(1 - p, dtype=q.dtype)
    const = float((p * np.log(p) + (1 - p) * np.log(1 - p)).mean())
    cross = ops.add(ops.mul(pt, ops.log(qc)), ops.mul(pc, ops.log(ops.sub(one, qc))))
    return ops.scalar_mul(ops.mean(cross), -1.0) + const


def _per_sample_normalize(d: np.ndarray) -> tuple[np.ndarray, bool]:
    flat = d.reshape(d.shape[0], -1)
    norms = np.sqrt((flat * flat).sum(axis=1))
    ok = bool(np.all(norms > 0))
    safe = np.where(norms > 0, norms, 1.0)
    return d / safe.reshape((-1,) + (1,) * (d.ndim - 1)), ok


def vat_direction(decoder_fn: Callable[[Tensor], Tensor], z: np.ndarray, p_ref: np.ndarray,
                  xi: float, eps: float, iters: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    """Power-iteration estimate of the KL-maximising feature perturbation.

    Runs in float64 regardless of the training dtype: with xi ~ 1e-6 the
    divergence gradient is below float32 resolution. Returns ``(r_adv, ok)``;
    each sample of ``r_adv`` has L2 norm ``eps``. ``ok`` is False when the
    divergence gradient vanished, in which case ``r_adv`` is zero.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if xi <= 0 or eps < 0:
        raise ValueError("xi must be > 0 and eps >= 0")
    z64 = np.asarray(z, dtype=np.float64)
    if eps == 0:
        return np.zeros_like(z64), True
    d, _ = _per_sample_normalize(rng.standard_normal(z64.shape))
    with default_dtype(np.float64):
        base = Tensor(z64, dtype=np.float64)
        for _ in range(iters):
            r = Tensor(xi * d, requires_grad=True, dtype=np.float64)
            q = decoder_fn(ops.add(base, r))
            (grad,) = gradients(binary_kl(p_ref, q), [r])
            d, ok = _per_sample_normalize(grad)
            if not ok:
                log.warning("VAT: divergence gradient vanished; using zero perturbation")
                return np.zeros_like(z64), False
    return eps * d, True


def intermediate_vat(z: np.ndarray, ctx: PerturbContext) -> Perturbation:
    if ctx.decoder_fn is None:
        raise ValueError("IntermediateVAT needs ctx.decoder_fn")
    cfg = ctx.cfg
    r_adv, ok = vat_direction(ctx.decoder_fn, z, ctx.p, cfg.vat_xi, cfg.vat_eps,
                              cfg.vat_iters, ctx.rng)
    return Perturbation(np.ones(z.shape), r_adv, ok)


_BUILDERS = {
    PerturbationKind.FEATURE_NOISE: feature_noise,
    PerturbationKind.FEATURE_DROPOUT: feature_dropout,
    PerturbationKind.OBJECT_MASKING: object_masking,
    PerturbationKind.CONTEXT_MASKING: context_masking,
    PerturbationKind.GUIDED_CUTOUT: guided_cutout,
    PerturbationKind.INTERMEDIATE_VAT: intermediate_vat,
    PerturbationKind.RANDOM_DROPOUT: random_dropout,
}


def build_perturbation(kind: PerturbationKind, z, ctx: PerturbContext) -> Perturbation:
    try:
        builder = _BUILDERS[PerturbationKind(kind)]
    except (KeyError, ValueError):
        raise ValueError(f"unknown perturbation kind {kind!r}") from None
    z = z.data if isinstance(z, Tensor) else np.asarray(z)
    if not np.isfinite(z).all():
        raise ValueError("feature map contains non-finite values")
    return builder(z, ctx)


def perturb(kind: PerturbationKind, z: Tensor, ctx: PerturbContext) -> tuple[Tensor, bool]:
    """Return ``(z_tilde, active)``; gradient flows into ``z`` only."""
    pert = build_perturbation(kind, z, ctx)
    return pert.apply(z), pert.active
