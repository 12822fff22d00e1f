"""Overlap and surface-distance metrics for binary 3D masks."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

_SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    """DSC in percent; two empty masks score 100."""
    pred, gt = _pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int((pred & gt).sum()) / total


def jaccard(pred, gt) -> float:
    pred, gt = _pair(pred, gt)
    union = int((pred | gt).sum())
    if union == 0:
        return 100.0
    return 100.0 * int((pred & gt).sum()) / union


def surface(mask) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour; outside the volume is background."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_SIX_NEIGHBOURS, border_value=0)
    return mask & ~interior


def asd(pred, gt, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> float | None:
    """Average symmetric surface distance in mm; None when either mask is empty."""
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    sp, sg = surface(pred), surface(gt)
    # distance from every voxel to the nearest surface voxel of the other mask
    to_gt = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_pred = ndimage.distance_transform_edt(~sp, sampling=spacing)
    total = to_gt[sp].sum() + to_pred[sg].sum()
    return float(total / (sp.sum() + sg.sum()))


@dataclass
class MetricReport:
    dsc: float
    jaccard: float
    asd: float | None

    @classmethod
    def compute(cls, pred, gt, spacing=(1.0, 1.0, 1.0)) -> "MetricReport":
        return cls(dice(pred, gt), jaccard(pred, gt), asd(pred, gt, spacing))


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    vals = np.asarray(values, dtype=np.float64)
    if vals.size == 0:
        return math.nan, math.nan
    std = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
    return float(vals.mean()), std


@dataclass
class Aggregate:
    n: int
    dsc: tuple[float, float]
    jaccard: tuple[float, float]
    asd: tuple[float, float]
    asd_missing: int

    @classmethod
    def of(cls, reports: Sequence[MetricReport]) -> "Aggregate":
        asds = [r.asd for r in reports if r.asd is not None]
        return cls(n=len(reports),
                   dsc=_mean_std([r.dsc for r in reports]),
                   jaccard=_mean_std([r.jaccard for r in reports]),
                   asd=_mean_std(asds),
                   asd_missing=len(reports) - len(asds))

    @classmethod
    def over_seeds(cls, per_seed: Sequence["Aggregate"]) -> "Aggregate":
        """Mean +- std of the per-seed means."""
        return cls(n=len(per_seed),
                   dsc=_mean_std([a.dsc[0] for a in per_seed]),
                   jaccard=_mean_std([a.jaccard[0] for a in per_seed]),
                   asd=_mean_std([a.asd[0] for a in per_seed if not math.isnan(a.asd[0])]),
                   asd_missing=sum(a.asd_missing for a in per_seed))

    def line(self, label: str = "aggregate") -> str:
        def fmt(pair, digits):
            return f"{pair[0]:.{digits}f} ± {pair[1]:.{digits}f}"
        return (f"{label}\tn={self.n}\tDSC {fmt(self.dsc, 2)}\tJaccard {fmt(self.jaccard, 2)}"
                f"\tASD {fmt(self.asd, 2)}\tasd_missing={self.asd_missing}")


def report_lines(case_ids: Sequence[str], reports: Sequence[MetricReport]) -> list[str]:
    """One JSON line per case followed by the aggregate line."""
    lines = [json.dumps({"case": cid, **asdict(r)}) for cid, r in zip(case_ids, reports)]
    lines.append(Aggregate.of(reports).line())
    return lines
