"""Patch sampling and sliding-window geometry."""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np


def axis_positions(size: int, patch: int, stride: int) -> list[int]:
    if patch > size:
        raise ValueError(f"patch {patch} larger than volume extent {size}; pad the volume first")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def sliding_positions(volume_shape: Sequence[int], patch_shape: Sequence[int],
                      stride: Sequence[int] | int) -> list[tuple[int, int, int]]:
    """Patch corners covering every voxel; the last corner per axis touches the boundary."""
    if isinstance(stride, int):
        stride = (stride,) * len(volume_shape)
    per_axis = [axis_positions(v, p, s) for v, p, s in zip(volume_shape, patch_shape, stride)]
    return list(itertools.product(*per_axis))


def sliding_window_predict(volume: np.ndarray, patch: int, stride: int,
                           predict: Callable[[np.ndarray], np.ndarray],
                           batch_size: int = 16) -> np.ndarray:
    """Average ``predict`` over overlapping patches; each voxel gets the mean of its covers.

    ``predict`` maps a stack of patches (B, P, P, P) to probabilities of the same shape.
    """
    shape = volume.shape
    acc = np.zeros(shape, dtype=np.float64)
    hits = np.zeros(shape, dtype=np.float64)
    corners = sliding_positions(shape, (patch,) * 3, stride)
    for start in range(0, len(corners), batch_size):
        chunk = corners[start:start + batch_size]
        regions = [tuple(slice(c, c + patch) for c in corner) for corner in chunk]
        preds = predict(np.stack([volume[r] for r in regions]))
        for r, pr in zip(regions, preds):
            acc[r] += pr
            hits[r] += 1.0
    return acc / hits


def random_patch(rng: np.random.Generator, image: np.ndarray, label: np.ndarray | None,
                 patch: int, foreground_bias: float = 0.0):
    """Random crop; with probability ``foreground_bias`` it is centred on a lesion voxel."""
    shape = image.shape
    if label is not None and foreground_bias > 0 and rng.random() < foreground_bias:
        fg = np.argwhere(label > 0)
        if len(fg):
            centre = fg[int(rng.integers(len(fg)))]
            corner = [int(np.clip(c - patch // 2, 0, s - patch)) for c, s in zip(centre, shape)]
        else:
            corner = [int(rng.integers(0, s - patch + 1)) for s in shape]
    else:
        corner = [int(rng.integers(0, s - patch + 1)) for s in shape]
    region = tuple(slice(c, c + patch) for c in corner)
    return image[region], (label[region] if label is not None else None)
