"""Confidence and consensus uncertainty over the K+1 decoder predictions.

All functions take detached numpy arrays; the maps are constants for the
backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

TAU_M = 0.34
TAU_S = 0.12


@dataclass
class UncertaintyPair:
    u_m: np.ndarray
    u_s: np.ndarray
    mu: np.ndarray


@dataclass
class ReliableMask:
    omega: np.ndarray
    tau_m: float
    tau_s: float

    @property
    def fraction(self) -> float:
        return float(self.omega.mean()) if self.omega.size else 0.0

    @property
    def count(self) -> int:
        return int(self.omega.sum())


def _stack(p, q_list: Sequence) -> np.ndarray:
    if len(q_list) < 1:
        raise ValueError("need at least one auxiliary prediction (K >= 1)")
    p = np.asarray(p)
    for q in q_list:
        if np.shape(q) != p.shape:
            raise ValueError(f"prediction shape {np.shape(q)} != main prediction {p.shape}")
    return np.stack([np.asarray(q) for q in q_list] + [p])


def mean_prediction(p, q_list: Sequence) -> np.ndarray:
    """mu = (sum_k q^k + p) / (K + 1)."""
    preds = _stack(p, q_list)
    return preds.sum(axis=0) / preds.shape[0]


def confidence_uncertainty(mu, binary_entropy: bool = False) -> np.ndarray:
    """-mu ln mu with 0 ln 0 = 0; optionally the full Bernoulli entropy."""
    mu = np.asarray(mu, dtype=np.float64)

    def xlogx(v):
        return np.where(v > 0, v * np.log(np.where(v > 0, v, 1.0)), 0.0)

    u = -xlogx(mu)
    if binary_entropy:
        u = u - xlogx(1.0 - mu)
    return u


def consensus_uncertainty(p, q_list: Sequence, mu) -> np.ndarray:
    """sqrt(sum of squared deviations from mu) / (K + 1); the scale sits outside the root."""
    preds = _stack(p, q_list).astype(np.float64)
    dev = preds - np.asarray(mu, dtype=np.float64)
    return np.sqrt((dev * dev).sum(axis=0)) / preds.shape[0]


def quantify(p, q_list: Sequence, binary_entropy: bool = False) -> UncertaintyPair:
    mu = mean_prediction(p, q_list)
    return UncertaintyPair(u_m=confidence_uncertainty(mu, binary_entropy),
                           u_s=consensus_uncertainty(p, q_list, mu), mu=mu)


def reliable_mask(u_m, u_s, tau_m: float = TAU_M, tau_s: float = TAU_S) -> ReliableMask:
    """Omega = {i : u_s < tau_s and u_m < tau_m} (strict)."""
    if tau_m < 0 or tau_s < 0:
        raise ValueError("thresholds must be non-negative")
    omega = (np.asarray(u_s) < tau_s) & (np.asarray(u_m) < tau_m)
    return ReliableMask(omega=omega, tau_m=tau_m, tau_s=tau_s)
