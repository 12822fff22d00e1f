"""Exactly invertible spatial transforms: the 48 cube symmetries plus optional wrap shifts.

A transform acts on the last three axes as ``roll(transpose(flip(v, F), perm), shift)``:
flip the input axes in ``F``, move input axis ``perm[i]`` to output axis ``i``,
then cyclically shift. Every such map is a pure voxel permutation, so the
inverse is exact and works equally on images, probability maps and masks.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, ops

AXES = "XYZ"
PERMUTATIONS = tuple(itertools.permutations(range(3)))
FLIP_SETS = tuple(frozenset(i for i in range(3) if bits >> i & 1) for bits in range(8))


@dataclass(frozen=True)
class Transform:
    perm: tuple[int, int, int] = (0, 1, 2)
    flips: frozenset = frozenset()
    shift: tuple[int, int, int] = (0, 0, 0)

    @property
    def is_identity(self) -> bool:
        return self.perm == (0, 1, 2) and not self.flips and not any(self.shift)

    def token(self) -> str:
        perm = "".join(AXES[a] for a in self.perm)
        flips = "".join(AXES[a] for a in sorted(self.flips))
        return f"p{perm};f{flips};s{','.join(str(s) for s in self.shift)}"

    @classmethod
    def parse(cls, token: str) -> "Transform":
        m = re.fullmatch(r"p([XYZ]{3});f([XYZ]{0,3});s(-?\d+),(-?\d+),(-?\d+)", token.strip())
        if m is None or sorted(m.group(1)) != list(AXES):
            raise ValueError(f"malformed transform token {token!r}")
        return cls(perm=tuple(AXES.index(a) for a in m.group(1)),
                   flips=frozenset(AXES.index(a) for a in m.group(2)),
                   shift=tuple(int(m.group(i)) for i in (3, 4, 5)))

    def __str__(self) -> str:
        return self.token()


IDENTITY = Transform()


def group_elements() -> list[Transform]:
    """All 48 flip/permutation elements (shift-free)."""
    return [Transform(perm=p, flips=f) for p in PERMUTATIONS for f in FLIP_SETS]


@dataclass(frozen=True)
class TransformConfig:
    flips: bool = True
    permutations: bool = True
    max_shift: int = 0

    def enabled(self) -> list[Transform]:
        perms = PERMUTATIONS if self.permutations else ((0, 1, 2),)
        flips = FLIP_SETS if self.flips else (frozenset(),)
        return [Transform(perm=p, flips=f) for p in perms for f in flips]


def sample_transform(rng: np.random.Generator, cfg: TransformConfig = TransformConfig()) -> Transform:
    elements = cfg.enabled()
    if not elements:
        raise ValueError("transform config enables no group elements")
    t = elements[int(rng.integers(len(elements)))]
    if cfg.max_shift > 0:
        shift = tuple(int(s) for s in rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=3))
        t = Transform(t.perm, t.flips, shift)
    return t


def compose(a: Transform, b: Transform) -> Transform:
    """The transform equal to applying ``b`` first, then ``a``."""
    flips = set(b.flips) ^ {b.perm[j] for j in a.flips}
    perm = tuple(b.perm[a.perm[i]] for i in range(3))
    mid = [-s if j in a.flips else s for j, s in enumerate(b.shift)]
    shift = tuple(mid[a.perm[i]] + a.shift[i] for i in range(3))
    return Transform(perm=perm, flips=frozenset(flips), shift=shift)


def invert(t: Transform) -> Transform:
    inv = tuple(int(i) for i in np.argsort(t.perm))
    unshift = [-t.shift[inv[j]] for j in range(3)]
    shift = tuple(-s if j in t.flips else s for j, s in enumerate(unshift))
    flips = frozenset(inv[j] for j in t.flips)
    return Transform(perm=inv, flips=flips, shift=shift)


def _spatial_axes(ndim: int) -> tuple[int, int, int]:
    if ndim < 3:
        raise ValueError(f"transforms need at least 3 axes, got {ndim}")
    return (ndim - 3, ndim - 2, ndim - 1)


def apply(t: Transform, v):
    """Apply ``t`` to the trailing three axes of an ndarray or Tensor."""
    if isinstance(v, Tensor):
        return _apply_tensor(t, v)
    v = np.asarray(v)
    axes = _spatial_axes(v.ndim)
    lead = v.ndim - 3
    out = np.flip(v, tuple(axes[i] for i in sorted(t.flips))) if t.flips else v
    out = out.transpose(tuple(range(lead)) + tuple(lead + a for a in t.perm))
    if any(t.shift):
        out = np.roll(out, t.shift, axes)
    return np.ascontiguousarray(out)


def _apply_tensor(t: Transform, v: Tensor) -> Tensor:
    axes = _spatial_axes(v.ndim)
    lead = v.ndim - 3
    out = v
    if t.flips:
        out = ops.flip(out, tuple(axes[i] for i in sorted(t.flips)))
    if t.perm != (0, 1, 2):
        out = ops.transpose(out, tuple(range(lead)) + tuple(lead + a for a in t.perm))
    if any(t.shift):
        out = ops.roll(out, t.shift, axes)
    return out
