"""Inference and evaluation with the main decoder only."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..data.patches import sliding_positions
from ..metrics import Aggregate, MetricReport, report_lines
from ..net import MAIN, Network, forward_aux, forward_main, load_network
from ..perturb import KINDS, PerturbConfig, PerturbContext, PerturbationKind, build_perturbation
from ..uncertainty import quantify
from .dataset import Case
from .train import _vat_decoder, infer_probability


@dataclass
class Prediction:
    probability: np.ndarray
    mask: np.ndarray


def infer(net: Network | str, volume: np.ndarray, stride: int | None = None) -> Prediction:
    """Sliding-window probabilities (overlap-averaged) and the 0.5-binarized mask."""
    if not isinstance(net, Network):
        net, _, _ = load_network(net)
    patch = net.cfg.patch_shape
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise ValueError(f"expected a 3-D volume, got shape {volume.shape}")
    if any(s < patch for s in volume.shape):
        raise ValueError(f"volume {volume.shape} is smaller than the {patch}^3 patch; "
                         f"pad it to at least {patch} per axis")
    prob = infer_probability(net, volume, patch, stride or max(1, patch // 2))
    return Prediction(prob, prob > 0.5)


def evaluate(net: Network, cases: Sequence[Case], stride: int | None = None
             ) -> tuple[list[MetricReport], Aggregate]:
    if not cases:
        raise ValueError("nothing to evaluate")
    reports = []
    for case in cases:
        if case.label is None:
            raise ValueError(f"case {case.case_id} has no label; unlabeled splits cannot be evaluated")
        pred = infer(net, case.image, stride)
        reports.append(MetricReport.compute(pred.mask, case.label, case.spacing))
    return reports, Aggregate.of(reports)


def evaluation_lines(cases: Sequence[Case], reports: Sequence[MetricReport]) -> list[str]:
    return report_lines([c.case_id for c in cases], reports)


def infer_uncertainty(net: Network, volume: np.ndarray, stride: int | None = None,
                      perturb_cfg: PerturbConfig = PerturbConfig(), seed: int = 0,
                      binary_entropy: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Overlap-averaged u_m and u_s maps from the main and all auxiliary decoders.

    Auxiliary inputs are perturbed exactly as in training, with a seeded rng.
    """
    if net.num_aux == 0:
        raise ValueError("uncertainty maps need the auxiliary decoders (phase-2 checkpoint)")
    patch = net.cfg.patch_shape
    stride = stride or max(1, patch // 2)
    dtype = net.params[f"{MAIN}.head.w"].dtype
    rng = np.random.default_rng([seed, 200])
    acc = np.zeros((2,) + volume.shape)
    hits = np.zeros(volume.shape)
    for corner in sliding_positions(volume.shape, (patch,) * 3, stride):
        region = tuple(slice(c, c + patch) for c in corner)
        x = np.asarray(volume[region], dtype=dtype)[None, None]
        p, feats = forward_main(net, x)
        p_ref = np.array(p.data)
        qs = []
        for k in range(1, net.cfg.K + 1):
            if not net.has_aux(k):
                continue
            kind = KINDS[k - 1]
            fn = _vat_decoder(net, k, feats.skips) if kind is PerturbationKind.INTERMEDIATE_VAT else None
            pert = build_perturbation(kind, feats.z, PerturbContext(p_ref, rng, perturb_cfg, fn))
            qs.append(np.asarray(forward_aux(net, k, pert.apply(feats.z), feats.skips).data))
        unc = quantify(p_ref, qs, binary_entropy)
        acc[(slice(None),) + region] += np.stack([unc.u_m[0, 0], unc.u_s[0, 0]])
        hits[region] += 1.0
    return acc[0] / hits, acc[1] / hits
