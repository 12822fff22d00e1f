"""Gradient check of the complete phase-2 objective on a tiny network."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..net import MAIN, NetConfig, Network, build_network, forward_main
from ..tensor import default_dtype
from ..tensor.gradcheck import GradCheckReport, grad_check
from .config import RunConfig
from .train import make_rngs, udc_objective


def objective_case(seed: int = 0, levels: int = 2, base_channels: int = 2, patch: int = 8,
                   alpha: float = 0.7, beta: float = 0.9, tau_m: float | None = None,
                   tau_s: float | None = None):
    """Network, batch, config and a recorded plan for one f64 finetune evaluation."""
    cfg = RunConfig(net=NetConfig(levels=levels, base_channels=base_channels, patch_shape=patch),
                    dtype="float64")
    rng = np.random.default_rng([seed, 300])
    net = build_network(cfg.net, seed, dtype=np.float64)
    net.add_aux_decoders()
    # move off the init point: zero norm shifts put ReLUs exactly on their kink whenever
    # a perturbation zeroes a whole feature map (e.g. every channel dropped)
    for name, t in net.params.items():
        if name.endswith((".g", ".b")):
            t.assign(t.data + 0.1 * rng.standard_normal(t.shape))
    shape = (1, 1, patch, patch, patch)
    xl = rng.standard_normal(shape)
    yl = (rng.random(shape) < 0.3).astype(np.float64)
    xu = rng.standard_normal(shape)
    with default_dtype(np.float64):
        # centre the main head so p straddles 0.5; object-guided perturbations need foreground
        p, _ = forward_main(net, np.concatenate([xl, xu]))
        logits = np.log(p.data) - np.log1p(-p.data)
        bias = net.params[f"{MAIN}.head.b"]
        bias.assign(bias.data - np.median(logits))
        terms = udc_objective(net, xl, yl, xu, cfg, alpha, beta, rngs=make_rngs(seed))
        if tau_m is None or tau_s is None:
            # an untrained net sits near mu = 0.5 where u_m > 0.34 everywhere; centre the
            # thresholds on the maps so the reliable set is a proper subset
            tau_m = float(np.quantile(terms.u_m, 0.7)) if tau_m is None else tau_m
            tau_s = float(np.quantile(terms.u_s, 0.7)) if tau_s is None else tau_s
        cfg = replace(cfg, tau_m=tau_m, tau_s=tau_s)
        terms = udc_objective(net, xl, yl, xu, cfg, alpha, beta, rngs=make_rngs(seed))
    return net, (xl, yl, xu), cfg, terms


def check_full_objective(seed: int = 0, eps: float = 1e-6, max_coords: int | None = None,
                         **kw) -> tuple[GradCheckReport, dict]:
    """Finite differences of L_S + alpha L_IC + beta L_UFC against reverse mode.

    The transform, the perturbation constants (VAT direction included) and
    the reliable set are recorded once and replayed, which makes the
    objective a deterministic smooth function of all decoder and encoder
    parameters.
    """
    net, (xl, yl, xu), cfg, terms = objective_case(seed, **kw)
    alpha, beta = terms.alpha, terms.beta
    plan = terms.plan

    def fn(leaves):
        replay = Network(net.cfg, dict(leaves), net.seed)
        return udc_objective(replay, xl, yl, xu, cfg, alpha, beta, plan=plan).total

    params = {name: t.data for name, t in net.params.items()}
    report = grad_check(fn, params, eps=eps, max_coords=max_coords,
                        rng=np.random.default_rng([seed, 301]))
    info = {"L_S": terms.l_s.item(), "L_IC": terms.l_ic.item(), "L_UFC": terms.l_ufc.item(),
            "omega_fraction": terms.omega_fraction, "flags": terms.flags,
            "parameters": int(sum(v.size for v in params.values()))}
    return report, info
